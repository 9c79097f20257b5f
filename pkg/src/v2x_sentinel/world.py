"""Fixed-step simulation engine: clock, kinematics, lossy broadcast bus and trace.

Each step runs four phases in a fixed order:

1. integrate physical actors over the elapsed step;
2. move due bus events into receiver inboxes;
3. emit phase: every agent, by ascending StationId, senses and transmits;
4. process phase: every agent, by ascending StationId, consumes its inbox,
   runs detectors and executes mitigations.

Random draws come from named streams (see :meth:`World.rng`), so agent
processing order never changes what any stream produces.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from .errors import InvariantViolation
from .messages import KinematicState, payload_type
from .trust import SignedMessage

STEP_MS = 100
TRACE_SCHEMA = "v2x-sentinel-trace"
TRACE_VERSION = 1


class Scenario(str, Enum):
    CLEAN = "clean"
    S1 = "s1"
    S2 = "s2"
    S3 = "s3"
    S4 = "s4"
    S5 = "s5"


@dataclass(frozen=True)
class SimConfig:
    duration_ms: int
    seed: int = 0
    loss_probability: float = 0.0
    latency_steps: int = 0
    scenario: Scenario = Scenario.CLEAN
    step_ms: int = STEP_MS
    cpm_every: int = 1
    spat_every: int = 10

    def __post_init__(self):
        if self.step_ms != STEP_MS:
            raise InvariantViolation(f"step_ms is fixed at {STEP_MS}")
        if self.duration_ms <= 0:
            raise InvariantViolation("duration_ms must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise InvariantViolation("seed must be an unsigned 64-bit integer")
        if not 0.0 <= self.loss_probability < 1.0:
            raise InvariantViolation("loss_probability must lie in [0, 1)")
        if self.latency_steps < 0:
            raise InvariantViolation("latency_steps must be non-negative")
        if self.cpm_every < 1 or self.spat_every < 1:
            raise InvariantViolation("message periods must be at least one step")

    @property
    def steps(self) -> int:
        return self.duration_ms // self.step_ms


def integrate_state(state: KinematicState, dt: float) -> KinematicState:
    """Constant-acceleration motion along the heading; speed clamps at zero."""
    v, a = state.speed, state.accel
    if a < 0.0 and v + a * dt < 0.0:
        t_stop = v / -a
        dist = v * t_stop + 0.5 * a * t_stop * t_stop
        v_new, a_new = 0.0, 0.0
    else:
        dist = v * dt + 0.5 * a * dt * dt
        v_new, a_new = v + a * dt, a
    return KinematicState(state.x + dist * math.cos(state.heading), state.y + dist * math.sin(state.heading),
                          state.heading, v_new, a_new)


@dataclass(frozen=True)
class BusEvent:
    deliver_at_step: int
    msg: SignedMessage
    sender: int
    receiver: int
    enqueued_at_step: int = 0

    def __post_init__(self):
        if self.deliver_at_step < self.enqueued_at_step:
            raise InvariantViolation("bus event scheduled in the past")


def _short(d: bytes) -> str:
    return d[:8].hex()


class Trace:
    """Buffered JSONL event log; line 1 is the schema header."""

    def __init__(self, header: Dict[str, Any], enabled: bool = True):
        self.header = {"schema": TRACE_SCHEMA, "version": TRACE_VERSION, **header}
        self.enabled = enabled
        self.events: List[Dict[str, Any]] = []

    def add(self, step: int, kind: str, **fields) -> None:
        if self.enabled or kind in ("detection", "mitigation"):
            self.events.append({"step": step, "t": step * STEP_MS, "kind": kind, **fields})

    def lines(self) -> Iterable[str]:
        yield json.dumps(self.header, sort_keys=True, separators=(",", ":"))
        for ev in self.events:
            yield json.dumps(ev, sort_keys=True, separators=(",", ":"))

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def of_kind(self, kind: str) -> List[Dict[str, Any]]:
        return [e for e in self.events if e["kind"] == kind]


class Bus:
    """Broadcast medium with independent per-link loss and fixed latency.

    A message sent at step ``k`` is delivered at step ``k + 1 + latency``.
    """

    def __init__(self, world: "World"):
        self.world = world
        self.pending: List[BusEvent] = []

    def broadcast(self, msg: SignedMessage, sender_agent) -> None:
        w = self.world
        k = w.step_index
        kind = payload_type(msg.payload_bytes).name
        w.trace.add(k, "tx", station=sender_agent.station, name=sender_agent.name, type=kind,
                    digest=_short(msg.digest()), size=len(msg.payload_bytes))
        p = w.config.loss_probability
        for rx in w.receivers():
            if rx is sender_agent:
                continue
            if p > 0.0 and w.rng(f"loss:{sender_agent.name}:{rx.name}").random() < p:
                w.trace.add(k, "drop", sender=sender_agent.station, receiver=rx.station,
                            digest=_short(msg.digest()))
                continue
            self.pending.append(BusEvent(k + 1 + w.config.latency_steps, msg, sender_agent.station,
                                         rx.station, k))

    def due(self, step: int) -> List[BusEvent]:
        now = [e for e in self.pending if e.deliver_at_step <= step]
        self.pending = [e for e in self.pending if e.deliver_at_step > step]
        return now


class World:
    """Holds agents, clock, bus, RNG streams and the trace."""

    def __init__(self, config: SimConfig, trace_enabled: bool = True, header: Optional[Dict[str, Any]] = None):
        self.config = config
        self.step_index = -1
        self.agents: List[Any] = []
        self.bus = Bus(self)
        self.trace = Trace(header or {"seed": config.seed, "scenario": config.scenario.value}, trace_enabled)
        self._rngs: Dict[str, np.random.Generator] = {}
        self.reports: List[tuple] = []

    @property
    def now_ms(self) -> int:
        return max(self.step_index, 0) * self.config.step_ms

    @property
    def dt(self) -> float:
        return self.config.step_ms / 1000.0

    def rng(self, name: str) -> np.random.Generator:
        g = self._rngs.get(name)
        if g is None:
            g = np.random.default_rng([self.config.seed & 0xFFFFFFFF, self.config.seed >> 32,
                                       zlib.crc32(name.encode())])
            self._rngs[name] = g
        return g

    def add(self, agent) -> None:
        if any(a.station == agent.station for a in self.agents):
            raise InvariantViolation(f"duplicate StationId {agent.station}")
        self.agents.append(agent)
        self.agents.sort(key=lambda a: a.station)
        agent.world = self

    def agent(self, name: str):
        for a in self.agents:
            if a.name == name:
                return a
        raise KeyError(name)

    def receivers(self) -> List[Any]:
        return [a for a in self.agents if getattr(a, "on_bus", True)]

    def physical(self) -> List[Any]:
        return sorted((a for a in self.agents if getattr(a, "physical", False)), key=lambda a: a.name)

    def active_physical(self) -> List[Any]:
        return [a for a in self.physical() if a.active]

    def broadcast(self, msg: SignedMessage, sender_agent) -> None:
        self.bus.broadcast(msg, sender_agent)

    def record_report(self, agent, report) -> None:
        self.reports.append((self.step_index, agent.name, report))
        self.trace.add(self.step_index, "detection", station=agent.station, name=agent.name,
                       report=report.to_dict())

    def step(self) -> None:
        self.step_index += 1
        k = self.step_index
        now = self.now_ms
        if k > 0:
            for a in self.physical():
                a.integrate(self.dt, now)
        for a in self.physical():
            a.update_presence(now)
        for ev in self.bus.due(k):
            rx = next(a for a in self.agents if a.station == ev.receiver)
            rx.inbox.append(ev)
        for a in self.agents:
            a.emit(self)
        for a in self.agents:
            a.process(self)
        for a in self.physical():
            if a.active:
                s = a.state
                self.trace.add(k, "state", name=a.name, x=round(s.x, 4), y=round(s.y, 4),
                               speed=round(s.speed, 4), heading=round(s.heading, 4))

    def run(self, steps: Optional[int] = None) -> "World":
        for _ in range(self.config.steps if steps is None else steps):
            self.step()
        return self
