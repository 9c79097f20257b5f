"""In-vehicle CAN substrate: frames, nominal schedules, traffic synthesis and CSV replay.

Frames can be handled either as :class:`CanFrame` objects or, for large
traces, as a :class:`FrameArrays` column store; both sort by (timestamp, id),
which is the arbitration order when two frames are ready together.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import InvariantViolation

MAX_ID = 0x7FF
MAX_PAYLOAD = 8


@dataclass(frozen=True)
class CanFrame:
    id: int
    payload: bytes
    timestamp_ms: float

    def __post_init__(self):
        if not 0 <= self.id <= MAX_ID:
            raise InvariantViolation(f"CAN id {self.id:#x} is not 11-bit")
        if len(self.payload) > MAX_PAYLOAD:
            raise InvariantViolation("CAN payload exceeds 8 bytes")


@dataclass(frozen=True)
class ScheduleEntry:
    id: int
    period_ms: float
    jitter_ms: float = 0.0
    payload: str = "counter"


@dataclass(frozen=True)
class CanSchedule:
    entries: Tuple[ScheduleEntry, ...]

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InvariantViolation("schedule ids must be unique")
        for e in self.entries:
            if e.period_ms <= 0 or e.jitter_ms < 0:
                raise InvariantViolation(f"bad timing for id {e.id:#x}")
            if not 0 <= e.id <= MAX_ID:
                raise InvariantViolation(f"CAN id {e.id:#x} is not 11-bit")

    @property
    def fastest_period(self) -> float:
        return min(e.period_ms for e in self.entries)

    @property
    def frames_per_second(self) -> float:
        return sum(1000.0 / e.period_ms for e in self.entries)


# synthetic id convention: 0x100 speed, 0x200 brake
DEFAULT_SCHEDULE = CanSchedule((
    ScheduleEntry(0x050, 50.0, 0.2, "counter"),
    ScheduleEntry(0x100, 10.0, 0.1, "speed"),
    ScheduleEntry(0x200, 20.0, 0.1, "brake"),
    ScheduleEntry(0x300, 100.0, 0.5, "counter"),
    ScheduleEntry(0x3A0, 200.0, 0.5, "counter"),
    ScheduleEntry(0x400, 100.0, 0.5, "counter"),
))


@dataclass
class FrameArrays:
    """Column store of a frame trace (times in ms, ids, 8-byte payload rows, lengths)."""

    t: np.ndarray
    ids: np.ndarray
    data: np.ndarray
    dlc: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def empty(cls) -> "FrameArrays":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 8), dtype=np.uint8),
                   np.zeros(0, dtype=np.int64))

    def sorted(self) -> "FrameArrays":
        order = np.lexsort((self.ids, self.t))
        return FrameArrays(self.t[order], self.ids[order], self.data[order], self.dlc[order])

    @classmethod
    def concat(cls, parts: Sequence["FrameArrays"]) -> "FrameArrays":
        return cls(np.concatenate([p.t for p in parts]), np.concatenate([p.ids for p in parts]),
                   np.concatenate([p.data for p in parts]), np.concatenate([p.dlc for p in parts])).sorted()

    def window(self, start_ms: float, end_ms: float) -> "FrameArrays":
        lo, hi = np.searchsorted(self.t, [start_ms, end_ms], side="left")
        return FrameArrays(self.t[lo:hi], self.ids[lo:hi], self.data[lo:hi], self.dlc[lo:hi])

    def to_frames(self) -> List[CanFrame]:
        return [CanFrame(int(i), bytes(d[:n]), float(t))
                for t, i, d, n in zip(self.t, self.ids, self.data, self.dlc)]

    @classmethod
    def from_frames(cls, frames: Iterable[CanFrame]) -> "FrameArrays":
        frames = list(frames)
        data = np.zeros((len(frames), 8), dtype=np.uint8)
        for k, f in enumerate(frames):
            data[k, :len(f.payload)] = np.frombuffer(f.payload, dtype=np.uint8)
        return cls(np.array([f.timestamp_ms for f in frames], dtype=float),
                   np.array([f.id for f in frames], dtype=np.int64), data,
                   np.array([len(f.payload) for f in frames], dtype=np.int64)).sorted()


def _stream_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _payloads(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    data = np.zeros((n, 8), dtype=np.uint8)
    if kind == "counter":
        data[:, 0] = np.arange(n) % 256
    elif kind == "speed":
        speed = np.clip(1000 + np.cumsum(rng.integers(-3, 4, n)), 0, 65535).astype(np.uint16)
        data[:, 0] = speed & 0xFF
        data[:, 1] = speed >> 8
    elif kind == "brake":
        data[:, 0] = (rng.random(n) < 0.1).astype(np.uint8)
    else:
        raise ValueError(f"unknown payload generator {kind!r}")
    return data


def periodic_stream(can_id: int, period_ms: float, jitter_ms: float, start_ms: float, end_ms: float,
                    rng: np.random.Generator, payload: str = "counter", phase_ms: float = None) -> FrameArrays:
    """Frames on the grid ``phase + k*period`` (k >= 0) within [start, end), uniform jitter."""
    phase = rng.uniform(0.0, period_ms) if phase_ms is None else phase_ms
    grid = start_ms + phase + period_ms * np.arange(max(0, int(np.ceil((end_ms - start_ms - phase) / period_ms))))
    t = grid + (rng.uniform(-jitter_ms, jitter_ms, len(grid)) if jitter_ms > 0 else 0.0)
    keep = (t >= start_ms) & (t < end_ms)
    t = t[keep]
    data = _payloads(payload, len(t), rng)
    return FrameArrays(t, np.full(len(t), can_id, dtype=np.int64), data, np.full(len(t), 8, dtype=np.int64))


def generate_arrays(schedule: CanSchedule, duration_ms: float, seed: int, start_ms: float = 0.0) -> FrameArrays:
    parts = [periodic_stream(e.id, e.period_ms, e.jitter_ms, start_ms, start_ms + duration_ms,
                             _stream_rng(seed, f"can:{e.id}"), e.payload)
             for e in schedule.entries]
    return FrameArrays.concat(parts) if parts else FrameArrays.empty()


def generate_traffic(schedule: CanSchedule, duration_ms: float, seed: int) -> List[CanFrame]:
    """Benign traffic sorted by (timestamp, id); lower id wins ties."""
    return generate_arrays(schedule, duration_ms, seed).to_frames()


def write_csv(frames: Iterable[CanFrame], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_ms", "id_hex", "payload_hex"])
        for f in frames:
            w.writerow([repr(float(f.timestamp_ms)), f"{f.id:03x}", f.payload.hex()])


def read_csv(path) -> List[CanFrame]:
    with open(path, newline="") as fh:
        rows = csv.DictReader(fh)
        return [CanFrame(int(r["id_hex"], 16), bytes.fromhex(r["payload_hex"]), float(r["timestamp_ms"]))
                for r in rows]
