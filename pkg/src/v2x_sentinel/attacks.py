"""Attack injectors. Each one alters honest behaviour from a configured onset.

Messages produced under attack are still signed by the legitimate HSM; the
injectors never touch the trust layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Optional, Tuple

import numpy as np

from .canbus import CanSchedule, DEFAULT_SCHEDULE, FrameArrays, periodic_stream
from .geometry import ConflictMatrix
from .messages import Classification, CpmPayload, KinematicState, PerceivedObject, SignalState, SpatPayload, SpatPhase

ATTACK_NAMES = {"s1": "s1MaliciousCpm", "s2": "s2HackedVehicle", "s3": "s3HackedSpat", "s4": "s4VruThreat",
                "s5": "s5Onboard"}


class CpmMode(str, Enum):
    FALSIFY = "falsify"
    GHOST = "ghost"
    SUPPRESS = "suppress"


class SpatMode(str, Enum):
    ALL_GREEN = "allGreen"
    CONFLICTING_PAIR = "conflictingPair"


class CanMode(str, Enum):
    DOS_FLOOD = "dosFlood"
    INJECTION = "injection"
    DATA_MODIFICATION = "dataModification"


@dataclass(frozen=True)
class AttackScript:
    scenario: str
    onset_ms: int
    params: Mapping[str, Any] = field(default_factory=dict)

    def validate(self, duration_ms: int) -> None:
        if self.scenario not in ATTACK_NAMES:
            raise ValueError(f"unknown attack scenario {self.scenario!r}")
        if not 0 <= self.onset_ms < duration_ms:
            raise ValueError(f"onset {self.onset_ms} ms outside the run (0..{duration_ms})")


# --- scenario 1 --------------------------------------------------------------

def inject_malicious_cpm(cpm: CpmPayload, mode: CpmMode, target_object_id: Optional[int] = None,
                         false_state: Optional[KinematicState] = None,
                         ghost_object: Optional[PerceivedObject] = None) -> CpmPayload:
    """Rewrite one outgoing CPM.

    ``falsify`` replaces the target's state (by default: same place, speed 0),
    ``ghost`` appends an object nobody sees and ``suppress`` drops the target.
    """
    mode = CpmMode(mode)
    objs = list(cpm.objects)
    if mode is CpmMode.GHOST:
        if ghost_object is None:
            raise ValueError("ghost mode needs a ghost object")
        if all(o.object_id != ghost_object.object_id for o in objs):
            objs.append(ghost_object)
    elif mode is CpmMode.SUPPRESS:
        objs = [o for o in objs if o.object_id != target_object_id]
    else:
        for i, o in enumerate(objs):
            if o.object_id == target_object_id:
                s = o.state
                new = false_state or KinematicState(s.x, s.y, s.heading, 0.0, 0.0)
                objs[i] = PerceivedObject(o.object_id, new, o.confidence, o.classification)
    return CpmPayload(cpm.sender, cpm.sensor_fov, tuple(objs), cpm.gen_time)


@dataclass
class MaliciousCpm:
    onset_ms: int
    mode: CpmMode
    target_object_id: Optional[int] = None
    ghost_xy: Tuple[float, float] = (0.0, 0.0)
    ghost_heading: float = math.pi / 2
    ghost_speed: float = 0.0
    ghost_object_id: int = 999

    def apply(self, rsu, cpm: CpmPayload, world) -> CpmPayload:
        if world.now_ms < self.onset_ms:
            return cpm
        ghost = None
        if self.mode is CpmMode.GHOST:
            ghost = PerceivedObject(self.ghost_object_id,
                                    KinematicState(self.ghost_xy[0], self.ghost_xy[1], self.ghost_heading,
                                                   self.ghost_speed, 0.0),
                                    1.0, Classification.VEHICLE)
        return inject_malicious_cpm(cpm, self.mode, self.target_object_id, ghost_object=ghost)


# --- scenarios 2 and 4 -------------------------------------------------------

def gentle_stop_profile(s0: float, v0: float, stop_s: float, tau: float) -> Tuple[float, float, float]:
    """(arclength, speed, accel) of a constant-deceleration stop at ``stop_s`` after ``tau`` seconds."""
    d = stop_s - s0
    if d <= 0.0 or v0 <= 0.0:
        return s0, 0.0, 0.0
    a = v0 * v0 / (2.0 * d)
    t_stop = v0 / a
    if tau >= t_stop:
        return stop_s, 0.0, 0.0
    return s0 + v0 * tau - 0.5 * a * tau * tau, v0 - a * tau, -a


class HackedVehicle:
    """Ignores red physically while its CAMs show a gentle stop at the line."""

    def __init__(self, onset_ms: int):
        self.onset_ms = onset_ms
        self._anchor: Optional[Tuple[int, float, float]] = None

    def active(self, now_ms: int) -> bool:
        return now_ms >= self.onset_ms

    def fake_state(self, vehicle, now_ms: int) -> KinematicState:
        if self._anchor is None:
            self._anchor = (now_ms, vehicle.s, vehicle.speed)
        t0, s0, v0 = self._anchor
        s, v, a = gentle_stop_profile(s0, v0, vehicle.stop_s, (now_ms - t0) / 1000.0)
        x, y, h = vehicle.path.pose(min(s, vehicle.path.length))
        return KinematicState(x, y, h, v, a)


def inject_hacked_vehicle(vehicle, onset_ms: int) -> HackedVehicle:
    vehicle.hijack = HackedVehicle(onset_ms)
    return vehicle.hijack


# --- scenario 3 --------------------------------------------------------------

def conflicting_pair(cm: ConflictMatrix, prefer: Optional[Tuple[int, int]] = None) -> Tuple[int, int]:
    if prefer is not None:
        if not cm.conflict(*prefer):
            raise ValueError(f"groups {prefer} do not conflict")
        return tuple(prefer)
    pairs = sorted(cm.conflicting_pairs())
    if not pairs:
        raise ValueError("no conflicting groups in this intersection")
    return pairs[0]


def inject_hacked_spat(spat: SpatPayload, mode: SpatMode, groups: Tuple[int, ...] = ()) -> SpatPayload:
    """All groups green, or just ``groups`` green on top of the honest phases."""
    mode = SpatMode(mode)
    chosen = None if mode is SpatMode.ALL_GREEN else set(groups)
    phases = tuple(SpatPhase(p.signal_group, SignalState.GREEN, p.time_to_change)
                   if chosen is None or p.signal_group in chosen else p for p in spat.phases)
    return SpatPayload(spat.sender, phases, spat.gen_time)


@dataclass
class HackedSpat:
    onset_ms: int
    mode: SpatMode
    groups: Tuple[int, ...] = ()

    def apply(self, light, spat: SpatPayload, world) -> SpatPayload:
        if world.now_ms < self.onset_ms:
            return spat
        light.hacked = True
        return inject_hacked_spat(spat, self.mode, self.groups)


# --- scenario 5 --------------------------------------------------------------

def inject_can_attack(frames: FrameArrays, mode: CanMode, onset_ms: float, end_ms: float,
                      rng: np.random.Generator, target_id: int = 0x100, rate_multiplier: float = 10.0,
                      schedule: CanSchedule = DEFAULT_SCHEDULE) -> FrameArrays:
    """Return ``frames`` with the attack applied from ``onset_ms`` to ``end_ms``."""
    mode = CanMode(mode)
    if mode is CanMode.DATA_MODIFICATION:
        data = frames.data.copy()
        hit = (frames.ids == target_id) & (frames.t >= onset_ms)
        data[hit, 0] ^= 0xFF
        return FrameArrays(frames.t.copy(), frames.ids.copy(), data, frames.dlc.copy())
    if mode is CanMode.DOS_FLOOD:
        period = schedule.fastest_period / rate_multiplier
        extra = periodic_stream(0x000, period, 0.0, onset_ms, end_ms, rng, "counter")
    else:
        entry = next(e for e in schedule.entries if e.id == target_id)
        P = entry.period_ms
        benign = frames.t[(frames.ids == target_id) & (frames.t >= onset_ms)]
        anchor = float(benign[0]) - onset_ms if len(benign) else 0.0
        # interleave halfway between benign frames so the merged period halves
        extra = periodic_stream(target_id, P, entry.jitter_ms, onset_ms, end_ms, rng, entry.payload,
                                phase_ms=(anchor + P / 2) % P)
    return FrameArrays.concat([frames, extra]).sorted()


@dataclass
class OnboardCompromise:
    onset_ms: int

    def asserted(self, now_ms: int) -> bool:
        return now_ms >= self.onset_ms


def inject_onboard_compromise(vehicle, onset_ms: int) -> OnboardCompromise:
    vehicle.compromise = OnboardCompromise(onset_ms)
    return vehicle.compromise
