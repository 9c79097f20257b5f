"""Planar helpers: segment intersection, polyline paths and conflict matrices."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import MalformedTopology
from .messages import MapPayload, normalize_heading

Point = Tuple[float, float]
EPS = 1e-9


def _orient(a: Point, b: Point, c: Point) -> float:
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a: Point, b: Point, p: Point) -> bool:
    return (min(a[0], b[0]) - EPS <= p[0] <= max(a[0], b[0]) + EPS
            and min(a[1], b[1]) - EPS <= p[1] <= max(a[1], b[1]) + EPS)


def segments_intersect(p1: Point, p2: Point, q1: Point, q2: Point) -> bool:
    """Closed-segment intersection; touching and collinear overlap count."""
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if ((d1 > EPS and d2 < -EPS) or (d1 < -EPS and d2 > EPS)) and \
       ((d3 > EPS and d4 < -EPS) or (d3 < -EPS and d4 > EPS)):
        return True
    if abs(d1) <= EPS and _on_segment(q1, q2, p1):
        return True
    if abs(d2) <= EPS and _on_segment(q1, q2, p2):
        return True
    if abs(d3) <= EPS and _on_segment(p1, p2, q1):
        return True
    if abs(d4) <= EPS and _on_segment(p1, p2, q2):
        return True
    return False


def polylines_cross(a: Sequence[Point], b: Sequence[Point]) -> bool:
    for i in range(len(a) - 1):
        for j in range(len(b) - 1):
            if segments_intersect(a[i], a[i + 1], b[j], b[j + 1]):
                return True
    return False


@dataclass(frozen=True)
class ConflictMatrix:
    """Symmetric relation over signal groups that must never be green together."""

    groups: Tuple[int, ...]
    conflicts: np.ndarray

    @property
    def n(self) -> int:
        return len(self.groups)

    def index(self, group: int) -> int:
        return self.groups.index(group)

    def __contains__(self, group: int) -> bool:
        return group in self.groups

    def conflict(self, g1: int, g2: int) -> bool:
        return bool(self.conflicts[self.index(g1), self.index(g2)])

    def conflicting_pairs(self) -> List[Tuple[int, int]]:
        out = []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if self.conflicts[i, j]:
                    out.append((self.groups[i], self.groups[j]))
        return out


def build_conflict_matrix(map_payload: MapPayload, centerlines: Mapping[int, Sequence[Point]],
                          signal_groups: Optional[Iterable[int]] = None) -> ConflictMatrix:
    """Derive group conflicts from lane centerline crossings.

    Two groups conflict iff some lane governed by one crosses (or touches)
    some lane governed by the other.

    Raises:
        MalformedTopology: a requested group governs no lane, or a lane has
            no usable centerline.
    """
    lanes_by_group: Dict[int, List[Sequence[Point]]] = {}
    for lane in map_payload.lanes:
        line = centerlines.get(lane.lane_id)
        if line is None or len(line) < 2:
            raise MalformedTopology(f"lane {lane.lane_id} has no polyline centerline")
        lanes_by_group.setdefault(lane.signal_group, []).append(line)
    groups = sorted(set(signal_groups) if signal_groups is not None else lanes_by_group)
    for g in groups:
        if g not in lanes_by_group:
            raise MalformedTopology(f"signal group {g} governs no lane")
    n = len(groups)
    m = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(i + 1, n):
            hit = any(polylines_cross(a, b)
                      for a in lanes_by_group[groups[i]] for b in lanes_by_group[groups[j]])
            m[i, j] = m[j, i] = hit
    return ConflictMatrix(tuple(groups), m)


class Path:
    """Arclength-parameterised polyline."""

    def __init__(self, points: Sequence[Point]):
        if len(points) < 2:
            raise ValueError("a path needs at least two points")
        self.points = [tuple(map(float, p)) for p in points]
        self.cum = [0.0]
        for a, b in zip(self.points, self.points[1:]):
            self.cum.append(self.cum[-1] + math.hypot(b[0] - a[0], b[1] - a[1]))

    @property
    def length(self) -> float:
        return self.cum[-1]

    def vertex_s(self, index: int) -> float:
        return self.cum[index]

    def pose(self, s: float) -> Tuple[float, float, float]:
        """(x, y, heading) at arclength ``s`` (clamped to the path)."""
        s = min(max(s, 0.0), self.length)
        i = bisect.bisect_right(self.cum, s) - 1
        i = min(max(i, 0), len(self.points) - 2)
        # skip zero-length segments
        while i < len(self.points) - 2 and self.cum[i + 1] - self.cum[i] <= 0.0:
            i += 1
        (x0, y0), (x1, y1) = self.points[i], self.points[i + 1]
        seg = self.cum[i + 1] - self.cum[i]
        f = 0.0 if seg <= 0.0 else (s - self.cum[i]) / seg
        heading = normalize_heading(math.atan2(y1 - y0, x1 - x0))
        return x0 + f * (x1 - x0), y0 + f * (y1 - y0), heading

    def project(self, x: float, y: float) -> float:
        """Arclength of the closest point on the path to (x, y)."""
        best, best_d = 0.0, math.inf
        for i, (a, b) in enumerate(zip(self.points, self.points[1:])):
            dx, dy = b[0] - a[0], b[1] - a[1]
            seg2 = dx * dx + dy * dy
            t = 0.0 if seg2 == 0 else max(0.0, min(1.0, ((x - a[0]) * dx + (y - a[1]) * dy) / seg2))
            px, py = a[0] + t * dx, a[1] + t * dy
            d = math.hypot(x - px, y - py)
            if d < best_d:
                best_d, best = d, self.cum[i] + t * math.sqrt(seg2)
        return best
