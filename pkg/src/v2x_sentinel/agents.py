"""Actor behaviour: vehicle OBU, roadside unit with its camera, traffic light and VRU handheld."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .canbus import CanSchedule, DEFAULT_SCHEDULE, generate_arrays
from .detection.can import CanDetectConfig, CanTimingDetector, can_learn_baseline
from .detection.checks import (CrossChecker, LocalObject, Region, check_consistency, check_plausibility,
                               check_security, cross_check_cpm)
from .detection.cpa import CollisionMonitor
from .detection.deviation import DeviationConfig, DeviationMonitor
from .detection.ekf import GateConfig, OnboardFix, VruEkfMonitor
from .detection.reports import Anomaly, DetectionReport, Detector, Source, Track
from .detection.spat import SpatHistory, check_spat_conflicts
from .errors import OutOfRange
from .geometry import ConflictMatrix, Path
from .intersection import TTC_UNBOUNDED, LaneGeometry, PhaseProgram
from .messages import (CamPayload, Classification, CpmPayload, DenmCause, DenmPayload, FieldOfView,
                       KinematicState, PerceivedObject, SignalState, SpatPayload, SpatPhase, decode, encode)
from .mitigation import (ActionKind, MitigationAction, MitigationPolicy, OverrideTarget, Outcome, Role,
                         request_light_override, route)
from .trust import Hsm, SignedMessage, Verdict, verify

log = logging.getLogger(__name__)

COMFORT_DECEL = 3.0
EMERGENCY_DECEL = 8.0
BRAKE_ONSET_DECEL = 1.5
MAX_ACCEL = 2.0
DENM_REPEAT_STEPS = 5
# braking aims this far short of the stop line so a stopped vehicle never rests on it
STOP_MARGIN = 0.5
DENM_REPEAT_MS = 3000
STOP_STATES = (SignalState.RED, SignalState.RED_YELLOW_BLINKING)

KIND_CLASS = {"vehicle": Classification.VEHICLE, "pedestrian": Classification.PEDESTRIAN,
              "cyclist": Classification.CYCLIST}


# --- shared plumbing ---------------------------------------------------------

@dataclass(frozen=True)
class Received:
    msg: SignedMessage
    payload: Any
    digest: bytes
    via: int


class Agent:
    """Base station: identity, HSM, inbox and the report-to-action path."""

    physical = False
    on_bus = True
    role: Optional[Role] = None

    def __init__(self, name: str, station: int, hsm: Hsm):
        self.name = name
        self.station = station
        self.hsm = hsm
        self.inbox: list = []
        self.world = None
        self.hmi_log: List[Tuple[int, str, bool]] = []
        self.policy = MitigationPolicy()
        self._latched: set = set()
        self._seen_denm: set = set()
        self._denm_repeats: List[Tuple[int, SignedMessage]] = []

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, station={self.station})"

    @property
    def active(self) -> bool:
        return True

    def emit(self, world) -> None:
        pass

    def process(self, world) -> None:
        pass

    def send(self, world, payload) -> Optional[SignedMessage]:
        if self.hsm.purged:
            return None
        msg = self.hsm.sign(encode(payload))
        world.broadcast(msg, self)
        return msg

    def receive(self, world) -> List[Received]:
        """Verify and decode the inbox; only accepted messages are returned."""
        events, self.inbox = self.inbox, []
        out = []
        for ev in sorted(events, key=lambda e: (e.msg.digest(), e.sender)):
            msg = ev.msg
            digest = msg.digest()
            verdict = verify(msg, world.root_public_key)
            world.trace.add(world.step_index, "rx", receiver=self.station, sender=ev.sender,
                            digest=digest[:8].hex(), verify=verdict.value)
            if verdict is not Verdict.ACCEPT:
                rep = check_security(msg, world.root_public_key, world.now_ms)
                self.report(world, rep, key=("security", digest))
                continue
            out.append(Received(msg, decode(msg.payload_bytes), digest, ev.sender))
        return out

    def report(self, world, rep: Optional[DetectionReport], key=None) -> None:
        """Record a report once per ``key`` and execute the mandated actions."""
        if rep is None:
            return
        if key is not None:
            if key in self._latched:
                return
            self._latched.add(key)
        world.record_report(self, rep)
        actions = route(rep, self.policy, self.role) if self.role else []
        for a in actions:
            if a.kind is ActionKind.PURGE_OWN_KEYS:
                continue
            self.execute(world, a, rep)
        for a in actions:
            if a.kind is ActionKind.PURGE_OWN_KEYS:
                self.execute(world, a, rep)

    def execute(self, world, action: MitigationAction, rep: DetectionReport) -> None:
        if action.kind is ActionKind.BROADCAST_DENM:
            msg = self.send_denm(world, DenmCause(action.payload["cause"]), rep)
            action.outcome = Outcome.DELIVERED if msg is not None else Outcome.IGNORED
            if msg is not None:
                action.payload["digest"] = msg.digest()[:8].hex()
        elif action.kind is ActionKind.PURGE_OWN_KEYS:
            self.hsm.purge()
            self._denm_repeats.clear()
            action.outcome = Outcome.DELIVERED
        elif action.kind is ActionKind.HMI_NOTIFY:
            action.outcome = self.notify(world, action, rep)
        elif action.kind is ActionKind.REQUEST_LIGHT_OVERRIDE:
            action.outcome = self.override(world, OverrideTarget(action.payload["target"]))
        world.trace.add(world.step_index, "mitigation", station=self.station, name=self.name,
                        detector=rep.detector.value, anomaly=rep.anomaly.value, action=action.to_dict())

    def notify(self, world, action, rep) -> Outcome:
        self.hmi_log.append((world.now_ms, f"{rep.detector.value}: {rep.anomaly.value}", True))
        return Outcome.DELIVERED

    def override(self, world, target: OverrideTarget) -> Outcome:
        return Outcome.IGNORED

    def event_state(self, rep: DetectionReport) -> KinematicState:
        return KinematicState(0.0, 0.0, 0.0, 0.0, 0.0)

    def send_denm(self, world, cause: DenmCause, rep: DetectionReport,
                  offender: Optional[int] = None) -> Optional[SignedMessage]:
        if self.hsm.purged:
            return None
        if offender is None:
            own = rep.detector in (Detector.CAN_TIMING, Detector.ONBOARD_CAMERA)
            offender = self.station if own else (rep.offender if rep.offender < 2 ** 32 else 0)
        evidence = rep.evidence[0] if rep.evidence else b"\x00" * 32
        denm = DenmPayload(self.station, cause, self.event_state(rep), offender, evidence, world.now_ms)
        msg = self.send(world, denm)
        if msg is not None:
            self._seen_denm.add(msg.digest())
            self._denm_repeats.append((world.step_index, msg))
        return msg

    def repeat_denms(self, world) -> None:
        keep = []
        for first, msg in self._denm_repeats:
            age = world.step_index - first
            if age * world.config.step_ms > DENM_REPEAT_MS or self.hsm.purged:
                continue
            if age > 0 and age % DENM_REPEAT_STEPS == 0:
                world.broadcast(msg, self)
            keep.append((first, msg))
        self._denm_repeats = keep


class PathActor(Agent):
    """Point mass moving along a polyline by arclength."""

    physical = True
    kind = "vehicle"

    def __init__(self, name: str, station: int, hsm: Hsm, path: Path, s0: float = 0.0, speed: float = 0.0,
                 target_speed: float = 0.0, spawn_ms: int = 0, object_id: int = 0):
        super().__init__(name, station, hsm)
        self.path = path
        self.s = float(s0)
        self.speed = float(speed)
        self.accel = 0.0
        self.target_speed = float(target_speed)
        self.spawn_ms = int(spawn_ms)
        self.object_id = object_id
        self._active = False
        self.despawned = False

    @property
    def active(self) -> bool:
        return self._active

    @property
    def classification(self) -> Classification:
        return KIND_CLASS[self.kind]

    @property
    def state(self) -> KinematicState:
        x, y, h = self.path.pose(self.s)
        return KinematicState(x, y, h, self.speed, self.accel)

    def update_presence(self, now_ms: int) -> None:
        if not self._active and not self.despawned and now_ms >= self.spawn_ms:
            self._active = True

    def integrate(self, dt: float, now_ms: int) -> None:
        if not self._active:
            return
        v, a = self.speed, self.accel
        if a < 0.0 and v + a * dt < 0.0:
            t_stop = v / -a
            self.s += v * t_stop + 0.5 * a * t_stop * t_stop
            self.speed, self.accel = 0.0, 0.0
        else:
            self.s += v * dt + 0.5 * a * dt * dt
            self.speed = v + a * dt
        if self.s >= self.path.length:
            self._active = False
            self.despawned = True


# --- sensors -----------------------------------------------------------------

@dataclass(frozen=True)
class Sighting:
    """One sensed actor: stable local id, class, noisy position and velocity."""

    local_id: int
    classification: Classification
    x: float
    y: float
    vx: float
    vy: float
    fresh: bool = True


@dataclass
class CameraAgent:
    """Roadside camera covering the intersection; noise is seeded per target."""

    fov: FieldOfView
    sigma_pos: float = 0.5
    sigma_vel: float = 0.15
    detection_probability: float = 0.98

    def observe(self, world, actors: Sequence[PathActor]) -> List[Tuple[PathActor, Optional[Sighting]]]:
        """Per actor inside the field of view: its sighting, or None when missed."""
        out = []
        for a in actors:
            s = a.state
            if not self.fov.contains(s.x, s.y):
                continue
            rng = world.rng(f"camera:{a.name}")
            hit = rng.random() < self.detection_probability
            n = rng.normal(size=4)
            if not hit:
                out.append((a, None))
                continue
            x, y = s.x + self.sigma_pos * n[0], s.y + self.sigma_pos * n[1]
            if not self.fov.contains(x, y):
                out.append((a, None))
                continue
            out.append((a, Sighting(a.object_id, a.classification, x, y,
                                    s.vx + self.sigma_vel * n[2], s.vy + self.sigma_vel * n[3])))
        return out


@dataclass(frozen=True)
class UwbFix:
    tag_id: int
    x: float
    y: float
    sigma: float


def uwb_locate(anchor: Tuple[float, float], vru: "VruAgent", rng: np.random.Generator, sigma: float = 0.3,
               max_range: float = 100.0) -> UwbFix:
    """Noisy UWB position of ``vru`` seen from ``anchor``.

    Raises:
        OutOfRange: the tag is farther than ``max_range`` from the anchor.
    """
    s = vru.state
    if math.hypot(s.x - anchor[0], s.y - anchor[1]) > max_range:
        raise OutOfRange(f"{vru.name} is beyond {max_range} m of the UWB anchor")
    n = rng.normal(size=2)
    return UwbFix(vru.tag_id, s.x + sigma * n[0], s.y + sigma * n[1], sigma)


@dataclass
class _CamTrack:
    sighting: Sighting
    misses: int = 0


# --- traffic light -----------------------------------------------------------

class TrafficLightAgent(Agent):
    """Fixed-cycle controller that broadcasts SPaT and hands it to the RSU by wire."""

    on_bus = False

    def __init__(self, name: str, station: int, hsm: Hsm, program: PhaseProgram, honor_probability: float = 0.0):
        super().__init__(name, station, hsm)
        self.program = program
        self.override_state: Optional[OverrideTarget] = None
        self._pending: Optional[OverrideTarget] = None
        self.hacked = False
        self.honor_probability = honor_probability
        self.spat_attack = None
        self.rsu: Optional["RsuAgent"] = None
        self._last_sent: Optional[tuple] = None

    def physical_state(self, group: int, t: int) -> SignalState:
        if self.override_state is OverrideTarget.RED_YELLOW_BLINKING:
            return SignalState.RED_YELLOW_BLINKING
        if self.override_state is OverrideTarget.ALL_RED:
            return SignalState.RED
        return self.program.state(group, t)

    def physical_spat(self, t: int) -> SpatPayload:
        if self.override_state is None:
            return self.program.spat(self.station, t)
        return SpatPayload(self.station, tuple(SpatPhase(g, self.physical_state(g, t), TTC_UNBOUNDED)
                                               for g in self.program.groups), t)

    def request_override(self, target: OverrideTarget) -> Outcome:
        if self.hacked and self.world.rng(f"override:{self.name}").random() >= self.honor_probability:
            return Outcome.IGNORED
        if self.override_state is not target:
            self._pending = target
        return Outcome.DELIVERED

    def emit(self, world) -> None:
        if self._pending is not None:
            self.override_state, self._pending = self._pending, None
        now = world.now_ms
        spat = self.physical_spat(now)
        if self.spat_attack is not None:
            spat = self.spat_attack.apply(self, spat, world)
        states = tuple((p.signal_group, p.state) for p in spat.phases)
        if world.step_index % world.config.spat_every == 0 or states != self._last_sent:
            msg = self.send(world, spat)
            self._last_sent = states
            if msg is not None and self.rsu is not None:
                self.rsu.wired.append(msg)


# --- VRU ---------------------------------------------------------------------

class VruAgent(PathActor):
    """Pedestrian or cyclist with a UWB tag and a handheld that shows warnings."""

    kind = "pedestrian"

    def __init__(self, name, station, hsm, path, s0=0.0, speed=0.0, target_speed=1.4, spawn_ms=0,
                 object_id=0, start_ms=0, start_accel=0.7, kind="pedestrian", tag_id=0):
        super().__init__(name, station, hsm, path, s0, speed, target_speed, spawn_ms, object_id)
        self.kind = kind
        self.start_ms = start_ms
        self.start_accel = start_accel
        self.tag_id = tag_id
        self.warned_at: Optional[int] = None

    def process(self, world) -> None:
        for r in self.receive(world):
            if not isinstance(r.payload, DenmPayload) or r.digest in self._seen_denm:
                continue
            self._seen_denm.add(r.digest)
            if r.payload.cause is DenmCause.VRU_COLLISION and self._concerns_me(r.payload):
                self.hmi_log.append((world.now_ms, "collision warning: stop", True))
                if self.warned_at is None:
                    self.warned_at = world.now_ms
        if not self.active:
            return
        dt = world.dt
        if self.warned_at is not None:
            self.accel = -min(self.speed / dt, COMFORT_DECEL) if self.speed > 0 else 0.0
        elif world.now_ms >= self.start_ms:
            self.accel = max(min((self.target_speed - self.speed) / dt, self.start_accel), -COMFORT_DECEL)
        else:
            self.accel = 0.0

    def _concerns_me(self, denm: DenmPayload) -> bool:
        s = self.state
        return math.hypot(denm.event_state.x - s.x, denm.event_state.y - s.y) <= 15.0


# --- vehicle -----------------------------------------------------------------

@dataclass
class OnboardSensor:
    range: float = 50.0
    half_angle: float = math.radians(35.0)
    sigma_pos: float = 0.3
    sigma_vel: float = 0.2

    def fov(self, state: KinematicState) -> FieldOfView:
        return FieldOfView(state.x, state.y, state.heading, self.range, self.half_angle)

    def sense(self, world, ego: PathActor, others: Sequence[PathActor]) -> List[Sighting]:
        fov = self.fov(ego.state)
        out = []
        for a in others:
            if a is ego:
                continue
            s = a.state
            if not fov.contains(s.x, s.y):
                continue
            n = world.rng(f"onboard:{ego.name}:{a.name}").normal(size=4)
            out.append(Sighting(a.object_id, a.classification, s.x + self.sigma_pos * n[0],
                                s.y + self.sigma_pos * n[1], s.vx + self.sigma_vel * n[2],
                                s.vy + self.sigma_vel * n[3]))
        return out


class VehicleCan:
    """The vehicle's CAN traffic for the whole run plus its timing detector."""

    def __init__(self, world, owner: str, duration_ms: int, schedule: CanSchedule = DEFAULT_SCHEDULE,
                 train_ms: int = 20000, cfg: CanDetectConfig = CanDetectConfig()):
        training = generate_arrays(schedule, train_ms, int(world.rng(f"can-train:{owner}").integers(2 ** 63)))
        self.model = can_learn_baseline(training, cfg)
        self.frames = generate_arrays(schedule, duration_ms + 200, int(world.rng(f"can:{owner}").integers(2 ** 63)))
        self.detector = CanTimingDetector(self.model, cfg)

    def observe(self, now_ms: int) -> List[DetectionReport]:
        return self.detector.observe(self.frames.window(now_ms - 100, now_ms), now_ms)


class VehicleAgent(PathActor):
    """Connected vehicle: CAM sender, onboard perception, detectors and signal-aware control."""

    role = Role.VEHICLE

    def __init__(self, name, station, hsm, lane: LaneGeometry, s0=0.0, speed=10.0, target_speed=None,
                 spawn_ms=0, object_id=0, region: Region = Region(), gate: GateConfig = GateConfig(),
                 window_k: int = 3, send_cpm: bool = False):
        path = lane.path()
        super().__init__(name, station, hsm, path, s0, speed, speed if target_speed is None else target_speed,
                         spawn_ms, object_id)
        self.lane = lane
        self.stop_s = path.vertex_s(lane.stop_index)
        self.group = lane.lane.signal_group
        self.region = region
        self.sensor = OnboardSensor()
        self.send_cpm = send_cpm
        self.snapshots: Dict[int, Tuple[KinematicState, List[Sighting]]] = {}
        self.cam_tracks: Dict[int, Track] = {}
        self.first_seen: Dict[int, int] = {}
        self.cross = CrossChecker(window_k)
        self.ekf = VruEkfMonitor(gate)
        self.belief: Dict[int, Tuple[SignalState, int]] = {}
        self.cautious = False
        self.braking = False
        self.hijack = None
        self.compromise = None
        self.can: Optional[VehicleCan] = None

    # -- emission --
    def emit(self, world) -> None:
        if not self.active:
            return
        now = world.now_ms
        ego = self.state
        sightings = self.sensor.sense(world, self, world.active_physical())
        self.snapshots[now] = (ego, sightings)
        self.snapshots.pop(now - 1000, None)
        cam_state = ego
        if self.hijack is not None and self.hijack.active(now):
            cam_state = self.hijack.fake_state(self, now)
        if not self.hsm.purged:
            self.send(world, CamPayload(self.station, cam_state, now))
            if self.send_cpm and world.step_index % world.config.cpm_every == 0:
                fov = self.sensor.fov(ego)
                objs = tuple(PerceivedObject(s.local_id, KinematicState.from_velocity(s.x, s.y, s.vx, s.vy),
                                             1.0, s.classification)
                             for s in sightings if fov.contains(s.x, s.y))[:128]
                self.send(world, CpmPayload(self.station, fov, objs, now))

    # -- processing --
    @property
    def hijacked(self) -> bool:
        return self.hijack is not None and self.hijack.active(self.world.now_ms)

    def process(self, world) -> None:
        received = self.receive(world)
        if not self.active:
            return
        now = world.now_ms
        t_prev = now - world.config.step_ms
        cams: Dict[int, Tuple[KinematicState, bytes]] = {}
        cpms: List[Tuple[CpmPayload, bytes]] = []
        for r in received:
            p = r.payload
            if isinstance(p, CamPayload):
                self._on_cam(world, p, r.digest)
                if p.gen_time == t_prev:
                    cams[p.sender] = (p.state, r.digest)
            elif isinstance(p, CpmPayload):
                self.report(world, check_plausibility(p, self.region, r.digest, now), key=("plaus", p.sender))
                if p.gen_time == t_prev:
                    cpms.append((p, r.digest))
            elif isinstance(p, DenmPayload):
                self._on_denm(world, p, r.digest)
            elif isinstance(p, SpatPayload):
                for ph in p.phases:
                    self.belief[ph.signal_group] = (ph.state, p.gen_time + ph.time_to_change)

        snap = self.snapshots.get(t_prev)
        if snap is not None:
            ego, sightings = snap
            local = [LocalObject(s.local_id, s.x, s.y) for s in sightings]
            findings = cross_check_cpm(cams, cpms, local, self.sensor.fov(ego),
                                       (ego.x, ego.y), self.first_seen)
            for rep in self.cross.observe(now, findings):
                self.report(world, rep)
            fixes = [OnboardFix(s.local_id, s.x, s.y, s.vx, s.vy) for s in sightings
                     if s.classification in (Classification.PEDESTRIAN, Classification.CYCLIST)]
            for rep in self.ekf.observe(t_prev, fixes, cpms):
                self.report(world, rep)

        if self.can is not None:
            for rep in self.can.observe(now):
                self.report(world, rep)
        if self.compromise is not None and self.compromise.asserted(now):
            self.report(world, DetectionReport(Detector.ONBOARD_CAMERA, Anomaly.ADVERSARIAL_INPUT, self.station,
                                               (), now, source=Source.ONBOARD, subject=self.station),
                        key="compromise")
        self.repeat_denms(world)
        self._control(world)

    def _on_cam(self, world, cam: CamPayload, digest: bytes) -> None:
        now = world.now_ms
        self.first_seen.setdefault(cam.sender, cam.gen_time)
        self.report(world, check_plausibility(cam, self.region, digest, now), key=("plaus", cam.sender))
        trk = self.cam_tracks.setdefault(cam.sender, Track(cam.sender, Source.CAM))
        if len(trk):
            self.report(world, check_consistency(trk, cam, digest), key=("consistency", cam.sender))
        if not len(trk) or cam.gen_time >= trk.last[0]:
            trk.append(cam.gen_time, cam.state, digest)

    def _on_denm(self, world, denm: DenmPayload, digest: bytes) -> None:
        if digest in self._seen_denm:
            return
        self._seen_denm.add(digest)
        effective = not self.hijacked
        self.hmi_log.append((world.now_ms, f"DENM {denm.cause.name} from {denm.sender} about {denm.offender}",
                             effective))
        if effective and denm.cause in (DenmCause.HACKED_TRAFFIC_LIGHT, DenmCause.HACKED_VEHICLE):
            self.cautious = True

    def notify(self, world, action, rep) -> Outcome:
        self.hmi_log.append((world.now_ms, f"{rep.detector.value}: {rep.anomaly.value}", not self.hijacked))
        return Outcome.DELIVERED

    def event_state(self, rep: DetectionReport) -> KinematicState:
        return self.state

    # -- control --
    def believed_state(self, now: int) -> SignalState:
        entry = self.belief.get(self.group)
        if entry is None:
            return SignalState.RED
        state, change_at = entry
        if now < change_at or state in STOP_STATES:
            return state
        return SignalState.YELLOW if state == SignalState.GREEN else SignalState.RED

    def _control(self, world) -> None:
        dt = world.dt
        v = self.speed
        cruise = max(min((self.target_speed - v) / dt, MAX_ACCEL), -COMFORT_DECEL)
        d = self.stop_s - self.s
        if self.hijacked or d <= 0.0:
            self.braking = False
            self.accel = cruise
            return
        believed = self.believed_state(world.now_ms)
        must_stop = self.cautious or believed in STOP_STATES or believed == SignalState.YELLOW
        if not must_stop:
            self.braking = False
            self.accel = cruise
            return
        if v <= 0.0:
            self.braking = True
            self.accel = 0.0
            return
        d_aim = d - STOP_MARGIN
        req = v * v / (2.0 * d_aim) if d_aim > 0.0 else math.inf
        if not self.braking:
            if believed == SignalState.YELLOW and not self.cautious and req > COMFORT_DECEL:
                self.accel = cruise
                return
            if req > EMERGENCY_DECEL or req < BRAKE_ONSET_DECEL:
                self.accel = cruise if req < BRAKE_ONSET_DECEL else 0.0
                return
            self.braking = True
        self.accel = -min(req, EMERGENCY_DECEL)


# --- roadside unit -----------------------------------------------------------

class RsuAgent(Agent):
    """Gateway owning the roadside camera, the UWB anchor and the light control link."""

    role = Role.RSU
    COAST_STEPS = 5
    COAST_CONFIDENCE = 0.5

    def __init__(self, name, station, hsm, camera: CameraAgent, cm: ConflictMatrix,
                 light: Optional[TrafficLightAgent] = None, position=(0.0, 0.0), region: Region = Region(),
                 window_k: int = 3, uwb_sigma: float = 0.3, deviation: DeviationConfig = DeviationConfig(),
                 horizon: float = 4.0, d_min: float = 2.0):
        super().__init__(name, station, hsm)
        self.camera = camera
        self.cm = cm
        self.light = light
        if light is not None:
            light.rsu = self
        self.position = tuple(position)
        self.region = region
        self.uwb_sigma = uwb_sigma
        self.wired: List[SignedMessage] = []
        self.spat_history = SpatHistory()
        self.tracker: Dict[int, _CamTrack] = {}
        self.snapshots: Dict[int, List[Sighting]] = {}
        self.perceived: Dict[int, Track] = {}
        self.cam_tracks: Dict[int, Track] = {}
        self.first_seen: Dict[int, int] = {}
        self.association: Dict[int, int] = {}
        self.vru_tracks: Dict[int, Track] = {}
        self.cross = CrossChecker(window_k)
        self.deviation = DeviationMonitor(deviation)
        self.collision = CollisionMonitor(horizon, d_min, window_k)
        self.cpm_attack = None
        self._relayed: set = set()
        self._vru_vel: Dict[int, Tuple[float, float]] = {}

    @property
    def fov(self) -> FieldOfView:
        return self.camera.fov

    def emit(self, world) -> None:
        now = world.now_ms
        actors = world.active_physical()
        for actor, sighting in self.camera.observe(world, actors):
            oid = actor.object_id
            if sighting is not None:
                self.tracker[oid] = _CamTrack(sighting)
                trk = self.perceived.setdefault(oid, Track(oid, Source.CPM))
                trk.append(now, KinematicState.from_velocity(sighting.x, sighting.y, sighting.vx, sighting.vy))
        for oid in sorted(self.tracker):
            ct = self.tracker[oid]
            trk = self.perceived.get(oid)
            if trk is not None and len(trk) and trk.last[0] == now:
                ct.misses = 0
                continue
            ct.misses += 1
            if ct.misses > self.COAST_STEPS:
                del self.tracker[oid]
                continue
            s = ct.sighting
            dt = world.dt
            ct.sighting = Sighting(s.local_id, s.classification, s.x + s.vx * dt, s.y + s.vy * dt, s.vx, s.vy,
                                   fresh=False)
        objects = [ct.sighting for _, ct in sorted(self.tracker.items())
                   if self.fov.contains(ct.sighting.x, ct.sighting.y)]
        self.snapshots[now] = objects
        self.snapshots.pop(now - 1000, None)
        self._locate_vrus(world, actors)

        if world.step_index % world.config.cpm_every == 0 and not self.hsm.purged:
            objs = tuple(PerceivedObject(s.local_id, KinematicState.from_velocity(s.x, s.y, s.vx, s.vy),
                                         1.0 if s.fresh else self.COAST_CONFIDENCE, s.classification)
                         for s in objects)[:128]
            cpm = CpmPayload(self.station, self.fov, objs, now)
            if self.cpm_attack is not None:
                cpm = self.cpm_attack.apply(self, cpm, world)
            self.send(world, cpm)

    def _locate_vrus(self, world, actors) -> None:
        now = world.now_ms
        for a in actors:
            if not isinstance(a, VruAgent):
                continue
            try:
                fix = uwb_locate(self.position, a, world.rng(f"uwb:{a.name}"), self.uwb_sigma)
            except OutOfRange:
                continue
            vel = self._vru_vel.get(a.tag_id, (0.0, 0.0))
            best = None
            for s in self.snapshots[now]:
                if s.fresh and s.classification != Classification.VEHICLE:
                    d = math.hypot(s.x - fix.x, s.y - fix.y)
                    if d <= 2.0 and (best is None or d < best[0]):
                        best = (d, (s.vx, s.vy))
            if best is not None:
                vel = best[1]
            self._vru_vel[a.tag_id] = vel
            trk = self.vru_tracks.setdefault(a.tag_id, Track(a.tag_id, Source.UWB))
            trk.append(now, KinematicState.from_velocity(fix.x, fix.y, vel[0], vel[1]))

    def process(self, world) -> None:
        received = self.receive(world)
        now = world.now_ms
        t_prev = now - world.config.step_ms

        wired, self.wired = self.wired, []
        for msg in wired:
            digest = msg.digest()
            if verify(msg, world.root_public_key) is not Verdict.ACCEPT:
                self.report(world, check_security(msg, world.root_public_key, now), key=("security", digest))
                continue
            spat = decode(msg.payload_bytes)
            self.report(world, check_spat_conflicts(spat, self.cm, self.spat_history, digest),
                        key=("spat", spat.sender))

        cams: Dict[int, Tuple[KinematicState, bytes]] = {}
        cpms: List[Tuple[CpmPayload, bytes]] = []
        for r in received:
            p = r.payload
            if isinstance(p, CamPayload):
                self._on_cam(world, p, r.digest)
                if p.gen_time == t_prev:
                    cams[p.sender] = (p.state, r.digest)
            elif isinstance(p, CpmPayload):
                self.report(world, check_plausibility(p, self.region, r.digest, now), key=("plaus", p.sender))
                if p.gen_time == t_prev:
                    cpms.append((p, r.digest))
            elif isinstance(p, DenmPayload) and r.digest not in self._relayed and r.digest not in self._seen_denm:
                self._relayed.add(r.digest)
                self.hmi_log.append((now, f"relay DENM {p.cause.name} from {p.sender}", True))
                if not self.hsm.purged:
                    world.broadcast(r.msg, self)

        objects = self.snapshots.get(t_prev)
        if objects is not None:
            local = [LocalObject(s.local_id, s.x, s.y) for s in objects]
            findings = cross_check_cpm(cams, cpms, local, self.fov, None, self.first_seen)
            for rep in self.cross.observe(now, findings):
                self.report(world, rep)
            for station in sorted(cams):
                self._check_deviation(world, station, objects, t_prev)

        for tag in sorted(self.vru_tracks):
            vt = self.vru_tracks[tag]
            if not len(vt) or vt.last[0] != now:
                continue
            threats = [t for oid, t in sorted(self.perceived.items())
                       if self._is_vehicle(oid) and len(t) and t.last[0] == now]
            for rep in self.collision.observe(vt, threats, now):
                self.report(world, rep)
        self.repeat_denms(world)

    def _is_vehicle(self, oid: int) -> bool:
        ct = self.tracker.get(oid)
        return ct is not None and ct.sighting.classification == Classification.VEHICLE

    def _on_cam(self, world, cam: CamPayload, digest: bytes) -> None:
        self.first_seen.setdefault(cam.sender, cam.gen_time)
        self.report(world, check_plausibility(cam, self.region, digest, world.now_ms), key=("plaus", cam.sender))
        trk = self.cam_tracks.setdefault(cam.sender, Track(cam.sender, Source.CAM))
        if len(trk):
            self.report(world, check_consistency(trk, cam, digest), key=("consistency", cam.sender))
        if not len(trk) or cam.gen_time >= trk.last[0]:
            trk.append(cam.gen_time, cam.state, digest)

    def _check_deviation(self, world, station: int, objects: List[Sighting], t: int) -> None:
        cam = self.cam_tracks[station]
        oid = self.association.get(station)
        if oid is None:
            s = cam.at(t)
            best = None
            for o in objects:
                if o.fresh and o.classification == Classification.VEHICLE:
                    d = math.hypot(o.x - s.x, o.y - s.y)
                    if d <= 2.0 and (best is None or d < best[0]):
                        best = (d, o.local_id)
            if best is None:
                return
            oid = self.association[station] = best[1]
        perceived = self.perceived.get(oid)
        if perceived is None:
            return
        rep = self.deviation.observe(cam, perceived, t)
        if rep is not None:
            self.report(world, DetectionReport(rep.detector, rep.anomaly, rep.offender, rep.evidence, world.now_ms,
                                               rep.source, rep.subject, rep.details))

    def override(self, world, target: OverrideTarget) -> Outcome:
        if self.light is None:
            return Outcome.IGNORED
        return request_light_override(self.light, target)

    def notify(self, world, action, rep) -> Outcome:
        if rep.anomaly is Anomaly.IMMINENT_COLLISION:
            msg = self.send_denm(world, DenmCause.VRU_COLLISION, rep, offender=0)
            return Outcome.DELIVERED if msg is not None else Outcome.IGNORED
        return super().notify(world, action, rep)

    def event_state(self, rep: DetectionReport) -> KinematicState:
        if rep.anomaly is Anomaly.IMMINENT_COLLISION:
            trk = self.vru_tracks.get(rep.subject[0])
            if trk is not None and len(trk):
                s = trk.last[1]
                return KinematicState(s.x, s.y, s.heading, 0.0, 0.0)
        x, y = self.position
        return KinematicState(x, y, 0.0, 0.0, 0.0)
