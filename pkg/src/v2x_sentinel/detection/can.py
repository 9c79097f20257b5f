"""Timing-based CAN intrusion detection: flooding and message injection."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from ..canbus import CanFrame, FrameArrays
from ..errors import InsufficientData
from .reports import Anomaly, DetectionReport, Detector, Source

Frames = Union[FrameArrays, Iterable[CanFrame]]


@dataclass(frozen=True)
class CanDetectConfig:
    min_frames: int = 100
    dos_window_ms: float = 100.0
    dos_share: float = 0.30
    inj_window_ms: float = 1000.0
    inj_ratio: float = 0.6
    inj_mad_k: float = 5.0
    tick_ms: float = 100.0
    mad_floor_ms: float = 1e-3


@dataclass(frozen=True)
class PeriodStats:
    median: float
    mad: float
    count: int


@dataclass(frozen=True)
class BaselineModel:
    per_id: Dict[int, PeriodStats]

    def __contains__(self, can_id: int) -> bool:
        return can_id in self.per_id

    def injection_threshold(self, can_id: int, cfg: CanDetectConfig) -> float:
        """Inter-arrival median below which ``can_id`` counts as injected."""
        s = self.per_id[can_id]
        return max(cfg.inj_ratio * s.median, s.median - cfg.inj_mad_k * max(s.mad, cfg.mad_floor_ms))


def _arrays(frames: Frames) -> FrameArrays:
    return frames if isinstance(frames, FrameArrays) else FrameArrays.from_frames(frames)


def can_learn_baseline(frames: Frames, cfg: CanDetectConfig = CanDetectConfig()) -> BaselineModel:
    """Median and MAD of each id's inter-arrival time.

    Raises:
        InsufficientData: some id has fewer than ``cfg.min_frames`` frames.
    """
    arr = _arrays(frames)
    stats = {}
    for can_id in np.unique(arr.ids):
        t = arr.t[arr.ids == can_id]
        if len(t) < cfg.min_frames:
            raise InsufficientData(f"id {int(can_id):#05x}: {len(t)} frames, need {cfg.min_frames}")
        d = np.diff(t)
        med = float(np.median(d))
        stats[int(can_id)] = PeriodStats(med, float(np.median(np.abs(d - med))), len(t))
    return BaselineModel(stats)


def _frame_digest(arr: FrameArrays, i: int) -> bytes:
    body = struct.pack("<dH", float(arr.t[i]), int(arr.ids[i])) + arr.data[i, :arr.dlc[i]].tobytes()
    return hashlib.sha256(body).digest()


def _report(anomaly: Anomaly, arr: FrameArrays, i: int, time_ms: float, **details) -> DetectionReport:
    can_id = int(arr.ids[i])
    return DetectionReport(Detector.CAN_TIMING, anomaly, can_id, (_frame_digest(arr, i),), int(time_ms),
                           source=Source.CAN, subject=can_id, details=details)


def dos_hits(arr: FrameArrays, model: BaselineModel, cfg: CanDetectConfig, first: int = 0) -> Dict[int, int]:
    """First frame index (>= ``first``) per suspicious id whose trailing window share exceeds the limit."""
    if not len(arr):
        return {}
    known = np.array(sorted(model.per_id), dtype=np.int64)
    suspicious = (~np.isin(arr.ids, known)) | (arr.ids == 0)
    if not suspicious[first:].any():
        return {}
    lo = np.searchsorted(arr.t, arr.t - cfg.dos_window_ms, side="right")
    idx = np.arange(len(arr))
    hits = {}
    for can_id in np.unique(arr.ids[suspicious]):
        mine = arr.ids == can_id
        cs = np.concatenate(([0], np.cumsum(mine)))
        share = (cs[idx + 1] - cs[lo]) / (idx + 1 - lo)
        over = np.nonzero((share > cfg.dos_share) & mine & (idx >= first))[0]
        if len(over):
            hits[int(can_id)] = int(over[0])
    return hits


def injection_hits(arr: FrameArrays, model: BaselineModel, cfg: CanDetectConfig,
                   ticks: np.ndarray) -> Dict[int, tuple]:
    """First tick per baseline id whose windowed inter-arrival median is under the threshold."""
    hits = {}
    for can_id in sorted(model.per_id):
        sel = np.nonzero(arr.ids == can_id)[0]
        if len(sel) < 3:
            continue
        t = arr.t[sel]
        d, ends = np.diff(t), t[1:]
        thr = model.injection_threshold(can_id, cfg)
        cs = np.concatenate(([0], np.cumsum(d < thr)))
        hi = np.searchsorted(ends, ticks, side="right")
        lo = np.searchsorted(ends, ticks - cfg.inj_window_ms, side="right")
        n = hi - lo
        below = cs[hi] - cs[lo]
        # a median under thr needs at least half the window under thr; confirm candidates exactly
        for k in np.nonzero((n >= 2) & (2 * below >= n))[0]:
            med = float(np.median(d[lo[k]:hi[k]]))
            if med < thr:
                hits[can_id] = (float(ticks[k]), int(sel[hi[k]]), med)
                break
    return hits


def can_detect(frames: Frames, model: BaselineModel,
               cfg: CanDetectConfig = CanDetectConfig()) -> List[DetectionReport]:
    """Batch detection over a whole trace; at most one report per (anomaly, id)."""
    arr = _arrays(frames)
    if not len(arr):
        return []
    reports = []
    for can_id, i in dos_hits(arr, model, cfg).items():
        reports.append(_report(Anomaly.CAN_DOS, arr, i, arr.t[i]))
    t0, t1 = float(arr.t[0]), float(arr.t[-1])
    ticks = np.arange(t0 + cfg.inj_window_ms, t1 + cfg.tick_ms, cfg.tick_ms)
    for can_id, (tick, i, med) in injection_hits(arr, model, cfg, ticks).items():
        reports.append(_report(Anomaly.CAN_INJECTION, arr, i, tick, window_median_ms=med,
                               baseline_median_ms=model.per_id[can_id].median))
    return sorted(reports, key=lambda r: (r.sim_time_ms, r.offender))


class CanTimingDetector:
    """Streaming wrapper evaluated once per simulation step."""

    def __init__(self, model: BaselineModel, cfg: CanDetectConfig = CanDetectConfig()):
        self.model = model
        self.cfg = cfg
        self.buffer = FrameArrays.empty()
        self.reported: set = set()
        self.start_ms: Optional[float] = None

    def observe(self, new: FrameArrays, now_ms: float) -> List[DetectionReport]:
        if self.start_ms is None:
            self.start_ms = float(new.t[0]) if len(new) else float(now_ms)
        keep_from = now_ms - max(self.cfg.inj_window_ms, self.cfg.dos_window_ms) - self.cfg.tick_ms
        old = self.buffer.window(keep_from, np.inf)
        first = len(old)
        self.buffer = FrameArrays.concat([old, new]) if len(new) else old
        arr = self.buffer
        out = []
        for can_id, i in dos_hits(arr, self.model, self.cfg, first).items():
            if ("dos", can_id) not in self.reported:
                self.reported.add(("dos", can_id))
                out.append(_report(Anomaly.CAN_DOS, arr, i, now_ms))
        if now_ms - self.start_ms >= self.cfg.inj_window_ms:
            hits = injection_hits(arr, self.model, self.cfg, np.array([float(now_ms)]))
            for can_id, (_, i, med) in hits.items():
                if ("inj", can_id) not in self.reported:
                    self.reported.add(("inj", can_id))
                    out.append(_report(Anomaly.CAN_INJECTION, arr, i, now_ms, window_median_ms=med,
                                       baseline_median_ms=self.model.per_id[can_id].median))
        return sorted(out, key=lambda r: (r.anomaly.value, r.offender))
