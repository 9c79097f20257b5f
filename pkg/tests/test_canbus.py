import numpy as np
import pytest

from v2x_sentinel.canbus import (DEFAULT_SCHEDULE, CanFrame, CanSchedule, FrameArrays, ScheduleEntry,
                                 generate_arrays, generate_traffic, read_csv, write_csv)
from v2x_sentinel.detection.can import CanDetectConfig, CanTimingDetector, can_detect, can_learn_baseline
from v2x_sentinel.errors import InsufficientData, InvariantViolation


def test_frame_invariants():
    CanFrame(0x7FF, bytes(8), 0.0)
    with pytest.raises(InvariantViolation):
        CanFrame(0x800, b"", 0.0)
    with pytest.raises(InvariantViolation):
        CanFrame(1, bytes(9), 0.0)


def test_schedule_invariants():
    with pytest.raises(InvariantViolation):
        CanSchedule((ScheduleEntry(1, 10.0), ScheduleEntry(1, 20.0)))
    with pytest.raises(InvariantViolation):
        CanSchedule((ScheduleEntry(1, 0.0),))
    assert DEFAULT_SCHEDULE.fastest_period == 10.0
    assert DEFAULT_SCHEDULE.frames_per_second == pytest.approx(20 + 100 + 50 + 10 + 5 + 10)


def test_counts_follow_periods():
    duration = 10_000
    arr = generate_arrays(DEFAULT_SCHEDULE, duration, seed=4)
    for e in DEFAULT_SCHEDULE.entries:
        n = int(np.sum(arr.ids == e.id))
        assert abs(n - duration / e.period_ms) <= 1


def test_period_estimates_converge():
    arr = generate_arrays(DEFAULT_SCHEDULE, 60_000, seed=8)
    for e in DEFAULT_SCHEDULE.entries:
        d = np.diff(arr.t[arr.ids == e.id])
        assert np.median(d) == pytest.approx(e.period_ms, abs=2 * e.jitter_ms + 1e-9)
        assert d.mean() == pytest.approx(e.period_ms, rel=1e-3)


def test_traffic_sorted_with_lower_id_winning_ties():
    frames = FrameArrays.from_frames([CanFrame(0x300, b"", 5.0), CanFrame(0x100, b"", 5.0),
                                      CanFrame(0x200, b"", 1.0)]).to_frames()
    assert [(f.timestamp_ms, f.id) for f in frames] == [(1.0, 0x200), (5.0, 0x100), (5.0, 0x300)]
    traffic = generate_traffic(DEFAULT_SCHEDULE, 2000, seed=1)
    keys = [(f.timestamp_ms, f.id) for f in traffic]
    assert keys == sorted(keys)


def test_generation_is_deterministic():
    a, b = generate_arrays(DEFAULT_SCHEDULE, 3000, 5), generate_arrays(DEFAULT_SCHEDULE, 3000, 5)
    assert np.array_equal(a.t, b.t) and np.array_equal(a.data, b.data)
    assert not np.array_equal(a.t, generate_arrays(DEFAULT_SCHEDULE, 3000, 6).t)


def test_csv_round_trip(tmp_path):
    frames = generate_traffic(DEFAULT_SCHEDULE, 1500, seed=2) + [CanFrame(0x7, b"\x01\x02", 1600.123456789)]
    path = tmp_path / "can.csv"
    write_csv(frames, path)
    assert read_csv(path) == frames
    assert path.read_text().splitlines()[0] == "timestamp_ms,id_hex,payload_hex"


def test_window_and_concat():
    arr = generate_arrays(DEFAULT_SCHEDULE, 2000, seed=3)
    w = arr.window(500, 1000)
    assert len(w) and w.t.min() >= 500 and w.t.max() < 1000
    both = FrameArrays.concat([arr.window(1000, np.inf), arr.window(0, 1000)])
    assert np.array_equal(both.t, arr.t)


def test_baseline_learns_periods():
    model = can_learn_baseline(generate_arrays(DEFAULT_SCHEDULE, 20_000, seed=7))
    assert set(model.per_id) == {e.id for e in DEFAULT_SCHEDULE.entries}
    for e in DEFAULT_SCHEDULE.entries:
        assert model.per_id[e.id].median == pytest.approx(e.period_ms, abs=2 * e.jitter_ms + 1e-9)


def test_baseline_needs_enough_frames():
    with pytest.raises(InsufficientData):
        can_learn_baseline(generate_arrays(DEFAULT_SCHEDULE, 1000, seed=7))


def test_clean_traffic_raises_nothing():
    model = can_learn_baseline(generate_arrays(DEFAULT_SCHEDULE, 20_000, seed=7))
    assert can_detect(generate_arrays(DEFAULT_SCHEDULE, 30_000, seed=99), model) == []


def test_streaming_matches_batch_on_clean_traffic():
    model = can_learn_baseline(generate_arrays(DEFAULT_SCHEDULE, 20_000, seed=7))
    arr = generate_arrays(DEFAULT_SCHEDULE, 5000, seed=11)
    det = CanTimingDetector(model, CanDetectConfig())
    out = []
    for k in range(50):
        out += det.observe(arr.window(k * 100, (k + 1) * 100), (k + 1) * 100)
    assert out == []
