"""Intersection layout (lanes, MAP, conflict matrix) and fixed-cycle signal programs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import MalformedTopology
from .geometry import ConflictMatrix, Path, Point, build_conflict_matrix
from .messages import Approach, Lane, MapPayload, SignalState, SpatPayload, SpatPhase

# announced time-to-change when no change is scheduled
TTC_UNBOUNDED = 3_600_000


@dataclass(frozen=True)
class LaneGeometry:
    lane: Lane
    centerline: Tuple[Point, ...]
    stop_index: int = 1

    @property
    def lane_id(self) -> int:
        return self.lane.lane_id

    def path(self) -> Path:
        return Path(self.centerline)

    def stop_s(self) -> float:
        return self.path().vertex_s(self.stop_index)


@dataclass(frozen=True)
class Intersection:
    lanes: Tuple[LaneGeometry, ...]
    names: Mapping[str, int]
    map_sender: int = 0

    def lane(self, key) -> LaneGeometry:
        lane_id = self.names[key] if isinstance(key, str) else int(key)
        for lg in self.lanes:
            if lg.lane_id == lane_id:
                return lg
        raise KeyError(key)

    def map_payload(self, sender: int) -> MapPayload:
        return MapPayload(sender, tuple(lg.lane for lg in self.lanes))

    def centerlines(self) -> Dict[int, Tuple[Point, ...]]:
        return {lg.lane_id: lg.centerline for lg in self.lanes}

    def conflict_matrix(self, signal_groups: Optional[Sequence[int]] = None) -> ConflictMatrix:
        return build_conflict_matrix(self.map_payload(1), self.centerlines(), signal_groups)

    @property
    def signal_groups(self) -> List[int]:
        return sorted({lg.lane.signal_group for lg in self.lanes})

    @classmethod
    def from_dict(cls, data: Mapping) -> "Intersection":
        lanes, names = [], {}
        for entry in data["lanes"]:
            lane = Lane(int(entry["id"]), Approach[entry["ingress"]], Approach[entry["egress"]],
                        int(entry["signal_group"]))
            pts = tuple((float(p[0]), float(p[1])) for p in entry["centerline"])
            if len(pts) < 2:
                raise MalformedTopology(f"lane {lane.lane_id} needs at least two centerline points")
            lanes.append(LaneGeometry(lane, pts, int(entry.get("stop_index", 1))))
            if "name" in entry:
                names[str(entry["name"])] = lane.lane_id
        MapPayload(1, tuple(lg.lane for lg in lanes)).validate()
        return cls(tuple(lanes), names)


_ROT = {Approach.S: 0, Approach.E: 1, Approach.N: 2, Approach.W: 3}
_LEFT_OF = {Approach.S: Approach.W, Approach.E: Approach.S, Approach.N: Approach.E, Approach.W: Approach.N}
_RIGHT_OF = {Approach.S: Approach.E, Approach.E: Approach.N, Approach.N: Approach.W, Approach.W: Approach.S}
_OPPOSITE = {Approach.S: Approach.N, Approach.N: Approach.S, Approach.E: Approach.W, Approach.W: Approach.E}


def _rotate(p: Point, quarter_turns: int) -> Point:
    x, y = p
    for _ in range(quarter_turns % 4):
        x, y = -y, x
    return (round(x, 9), round(y, 9))


def canonical_layout(stop: float = 15.0, inner: float = 1.75, outer: float = 5.25,
                     reach: float = 80.0) -> Dict:
    """Four-arm, two-lanes-per-approach layout as a fixture dictionary.

    Each approach has a left-turn lane (own signal group) and a through/right
    lane; group numbers run S, E, N, W with odd = through, even = left.
    """
    templates = {
        "T": [(outer, -reach), (outer, -stop), (outer, reach)],
        "R": [(outer, -reach), (outer, -stop), (stop, -outer), (reach, -outer)],
        "L": [(inner, -reach), (inner, -stop), (-stop, inner), (-reach, inner)],
    }
    lanes = []
    lane_id = 1
    for k, app in enumerate((Approach.S, Approach.E, Approach.N, Approach.W)):
        through_group, left_group = 2 * k + 1, 2 * k + 2
        egress = {"T": _OPPOSITE[app], "R": _RIGHT_OF[app], "L": _LEFT_OF[app]}
        for mv in ("T", "R", "L"):
            lanes.append({
                "id": lane_id,
                "name": f"{app.name}_{mv}",
                "ingress": app.name,
                "egress": egress[mv].name,
                "signal_group": left_group if mv == "L" else through_group,
                "stop_index": 1,
                "centerline": [list(_rotate(p, _ROT[app])) for p in templates[mv]],
            })
            lane_id += 1
    return {"lanes": lanes}


@dataclass(frozen=True)
class Stage:
    duration_ms: int
    green: Tuple[int, ...] = ()
    yellow: Tuple[int, ...] = ()


class PhaseProgram:
    """Fixed cycle of stages; groups not listed in a stage are red."""

    def __init__(self, groups: Sequence[int], stages: Sequence[Stage], offset_ms: int = 0):
        if not stages or any(s.duration_ms <= 0 for s in stages):
            raise ValueError("program needs stages with positive durations")
        self.groups = tuple(sorted(groups))
        self.stages = tuple(stages)
        self.offset_ms = offset_ms
        self.cycle_ms = sum(s.duration_ms for s in stages)
        self.starts = []
        t = 0
        for s in stages:
            self.starts.append(t)
            t += s.duration_ms

    def _stage_at(self, t: int) -> Tuple[int, int]:
        """Index of the active stage and time already spent in it."""
        c = (t + self.offset_ms) % self.cycle_ms
        for i in range(len(self.stages) - 1, -1, -1):
            if c >= self.starts[i]:
                return i, c - self.starts[i]
        return 0, c

    @staticmethod
    def _state_in(stage: Stage, group: int) -> SignalState:
        if group in stage.green:
            return SignalState.GREEN
        if group in stage.yellow:
            return SignalState.YELLOW
        return SignalState.RED

    def state(self, group: int, t: int) -> SignalState:
        i, _ = self._stage_at(t)
        return self._state_in(self.stages[i], group)

    def time_to_change(self, group: int, t: int) -> int:
        i, spent = self._stage_at(t)
        current = self._state_in(self.stages[i], group)
        remaining = self.stages[i].duration_ms - spent
        for j in range(1, len(self.stages) + 1):
            st = self.stages[(i + j) % len(self.stages)]
            if self._state_in(st, group) != current:
                return remaining
            remaining += st.duration_ms
        return TTC_UNBOUNDED

    def spat(self, sender: int, t: int) -> SpatPayload:
        return SpatPayload(sender, tuple(SpatPhase(g, self.state(g, t), self.time_to_change(g, t))
                                         for g in self.groups), t)

    @classmethod
    def from_dict(cls, groups: Sequence[int], data: Mapping) -> "PhaseProgram":
        stages = [Stage(int(s["duration_ms"]), tuple(s.get("green", ())), tuple(s.get("yellow", ())))
                  for s in data["stages"]]
        return cls(groups, stages, int(data.get("offset_ms", 0)))

