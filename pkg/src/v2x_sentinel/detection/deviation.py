"""CAM-versus-perception speed deviation (the "gentle stop" lie)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional

from .reports import Anomaly, DetectionReport, Detector, Source, Track


@dataclass(frozen=True)
class DeviationConfig:
    sigma_perceived: float = 0.15
    sigma_cam: float = 0.1
    n_sigma: float = 3.0
    min_perceived_speed: float = 5.0
    window_k: int = 3

    @property
    def threshold(self) -> float:
        return self.n_sigma * math.hypot(self.sigma_perceived, self.sigma_cam)


def _deviating(cam: Track, perceived: Track, t: int, cfg: DeviationConfig) -> bool:
    c = cam.at(t)
    p = perceived.at(t)
    if c is None or p is None:
        return False
    prev = [s for tt, s in cam.history if tt < t]
    trending_down = not prev or c.speed <= prev[-1].speed
    return (p.speed >= cfg.min_perceived_speed and trending_down
            and abs(c.speed - p.speed) > cfg.threshold)


def check_cam_perception_deviation(cam: Track, perceived: Track,
                                   cfg: DeviationConfig = DeviationConfig()) -> Optional[DetectionReport]:
    """Stateless form: inspects the ``window_k`` latest CAM sample times."""
    times = [t for t, _ in cam.history][-cfg.window_k:]
    if len(times) < cfg.window_k or not all(_deviating(cam, perceived, t, cfg) for t in times):
        return None
    t = times[-1]
    return _report(cam, perceived, t, cfg)


def _report(cam: Track, perceived: Track, t: int, cfg: DeviationConfig) -> DetectionReport:
    c, p = cam.at(t), perceived.at(t)
    evidence = tuple(d for d in list(cam.digests)[-cfg.window_k:] if d) or (b"\x00" * 32,)
    return DetectionReport(Detector.CAM_PERCEPTION_DEVIATION, Anomaly.STOP_LIE, cam.subject, evidence, t,
                           source=Source.CAM, subject=cam.subject,
                           details={"cam_speed": c.speed, "perceived_speed": p.speed,
                                    "threshold": cfg.threshold})


class DeviationMonitor:
    """Streaming stopLie detector over associated (CAM, perception) track pairs."""

    def __init__(self, cfg: DeviationConfig = DeviationConfig()):
        self.cfg = cfg
        self.runs: Dict[int, int] = {}
        self.reported: set = set()

    def observe(self, cam: Track, perceived: Track, t: int) -> Optional[DetectionReport]:
        station = cam.subject
        if cam.at(t) is None or perceived.at(t) is None:
            return None  # a missed sample neither extends nor breaks the run
        if _deviating(cam, perceived, t, self.cfg):
            self.runs[station] = self.runs.get(station, 0) + 1
        else:
            self.runs[station] = 0
        if self.runs[station] >= self.cfg.window_k and station not in self.reported:
            self.reported.add(station)
            return _report(cam, perceived, t, self.cfg)
        return None
