"""Closest point of approach and VRU collision prediction."""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Sequence, Tuple

from .reports import Anomaly, DetectionReport, Detector, Source, Track


def closest_approach(p1, v1, p2, v2, horizon: float) -> Tuple[float, float]:
    """(time, distance) of minimum separation within [0, horizon] under constant velocity."""
    rx, ry = p2[0] - p1[0], p2[1] - p1[1]
    wx, wy = v2[0] - v1[0], v2[1] - v1[1]
    w2 = wx * wx + wy * wy
    t = 0.0 if w2 == 0.0 else min(max(-(rx * wx + ry * wy) / w2, 0.0), horizon)
    return t, math.hypot(rx + wx * t, ry + wy * t)


def predict_vru_collision(vru: Track, threats: Sequence[Track], horizon: float = 4.0, d_min: float = 2.0,
                          n_velocity: int = 5, sim_time_ms: Optional[int] = None) -> Optional[DetectionReport]:
    """Report the most urgent threat whose CPA falls below ``d_min`` within ``horizon`` seconds."""
    if len(vru) < 2:
        raise ValueError("VRU track needs at least two samples")
    _, vs = vru.last
    vv = vru.mean_velocity(n_velocity)
    best = None
    for trk in threats:
        if len(trk) < 2:
            raise ValueError("threat track needs at least two samples")
        _, ts = trk.last
        t, d = closest_approach((vs.x, vs.y), vv, (ts.x, ts.y), trk.mean_velocity(n_velocity), horizon)
        if d < d_min and (best is None or t < best[0]):
            best = (t, d, trk)
    if best is None:
        return None
    t, d, trk = best
    now = vru.last[0] if sim_time_ms is None else sim_time_ms
    return DetectionReport(Detector.VRU_COLLISION, Anomaly.IMMINENT_COLLISION, trk.subject, (), now,
                           source=Source.UWB, subject=(vru.subject, trk.subject),
                           details={"ttc": t, "cpa_distance": d})


class CollisionMonitor:
    """Requires ``window_k`` consecutive predictions per (VRU, threat) pair."""

    def __init__(self, horizon: float = 4.0, d_min: float = 2.0, window_k: int = 3):
        self.horizon = horizon
        self.d_min = d_min
        self.window_k = window_k
        self.runs: Dict[tuple, int] = {}
        self.reported: set = set()

    def observe(self, vru: Track, threats: Sequence[Track], now_ms: int) -> List[DetectionReport]:
        out = []
        live = set()
        for trk in sorted(threats, key=lambda t: repr(t.subject)):
            if len(trk) < 2 or len(vru) < 2:
                continue
            rep = predict_vru_collision(vru, [trk], self.horizon, self.d_min, sim_time_ms=now_ms)
            key = (vru.subject, trk.subject)
            if rep is None:
                continue
            live.add(key)
            self.runs[key] = self.runs.get(key, 0) + 1
            if self.runs[key] >= self.window_k and key not in self.reported:
                self.reported.add(key)
                out.append(rep)
        for key in list(self.runs):
            if key[0] == vru.subject and key not in live:
                self.runs[key] = 0
        return out
