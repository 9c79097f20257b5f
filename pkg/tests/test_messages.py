import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from payload_gen import GENERATORS
from v2x_sentinel.errors import InvariantViolation, MalformedMessage
from v2x_sentinel.messages import (CamPayload, Classification, CpmPayload, FieldOfView, KinematicState, Lane,
                                   MapPayload, PerceivedObject, SignalState, SpatPayload, SpatPhase, Approach,
                                   decode, encode, normalize_heading, payload_type)

# layout oracle: tag u8 | sender u32 | state 5*f64 | genTime u64, all little-endian
CAM_LAYOUT = "<BI5dQ"
CPM_HEAD = "<BI5dH"
CPM_OBJECT = "<H5ddB"


def test_cam_length_matches_layout_oracle():
    data = encode(CamPayload(1, KinematicState(0, 0, 0, 0, 0), 0))
    assert len(data) == struct.calcsize(CAM_LAYOUT) == 53
    assert data[0] == 0x01


def test_cam_bytes_match_independent_pack():
    s = KinematicState(1.5, -2.0, 0.25, 13.9, -1.0)
    assert encode(CamPayload(7, s, 1234)) == struct.pack(CAM_LAYOUT, 1, 7, 1.5, -2.0, 0.25, 13.9, -1.0, 1234)


@pytest.mark.parametrize("n", [0, 1, 5])
def test_cpm_length_matches_layout_oracle(n):
    fov = FieldOfView(0, 0, 0, 100, math.pi)
    objs = tuple(PerceivedObject(i, KinematicState(i, 0, 0, 1, 0), 1.0, Classification.VEHICLE) for i in range(n))
    data = encode(CpmPayload(3, fov, objs, 0))
    assert len(data) == struct.calcsize(CPM_HEAD) + n * struct.calcsize(CPM_OBJECT) + 8


def test_gen_time_change_is_local_to_its_field():
    s = KinematicState(3, 4, 1, 5, 0)
    a, b = encode(CamPayload(9, s, 1)), encode(CamPayload(9, s, 2 ** 40 + 7))
    diff = [i for i in range(len(a)) if a[i] != b[i]]
    start = struct.calcsize("<BI5d")
    assert diff and all(start <= i < start + 8 for i in diff)


def test_patched_speed_is_rejected():
    data = bytearray(encode(CamPayload(1, KinematicState(0, 0, 0, 10, 0), 0)))
    off = struct.calcsize("<BI3d")
    data[off:off + 8] = struct.pack("<d", 200.0)
    with pytest.raises(InvariantViolation):
        decode(bytes(data))


def test_empty_unknown_and_trailing_bytes():
    with pytest.raises(MalformedMessage):
        decode(b"")
    with pytest.raises(MalformedMessage):
        decode(b"\x42" + bytes(52))
    good = encode(CamPayload(1, KinematicState(0, 0, 0, 0, 0), 0))
    with pytest.raises(MalformedMessage):
        decode(good + b"\x00")
    with pytest.raises(MalformedMessage):
        payload_type(b"")


@pytest.mark.parametrize("kind", sorted(GENERATORS))
def test_every_truncation_rejected(kind):
    rng = np.random.default_rng(5)
    p = GENERATORS[kind](rng)
    data = encode(p)
    for n in range(len(data)):
        with pytest.raises(MalformedMessage):
            decode(data[:n])


@pytest.mark.parametrize("kind", sorted(GENERATORS))
def test_random_round_trip(kind):
    rng = np.random.default_rng(11)
    for _ in range(300):
        p = GENERATORS[kind](rng)
        assert decode(encode(p)) == p


finite = dict(allow_nan=False, allow_infinity=False)
states = st.builds(KinematicState, st.floats(-500, 500, **finite), st.floats(-500, 500, **finite),
                   st.floats(0, 2 * math.pi, exclude_max=True, **finite), st.floats(0, 100, **finite),
                   st.floats(-20, 20, **finite))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 2 ** 32 - 1), states, st.integers(0, 2 ** 64 - 1))
def test_cam_round_trip_property(sender, state, t):
    p = CamPayload(sender, state, t)
    assert decode(encode(p)) == p


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 2 ** 32 - 1), states, st.integers(0, 2 ** 64 - 1), st.integers(0, 2 ** 64 - 1))
def test_cam_injective_property(sender, state, t1, t2):
    assert (encode(CamPayload(sender, state, t1)) == encode(CamPayload(sender, state, t2))) == (t1 == t2)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 2 ** 32 - 1),
       st.lists(st.tuples(st.integers(0, 255), st.sampled_from(list(SignalState)), st.integers(0, 2 ** 32 - 1)),
                max_size=10, unique_by=lambda t: t[0]),
       st.integers(0, 2 ** 64 - 1))
def test_spat_round_trip_property(sender, phases, t):
    p = SpatPayload(sender, tuple(SpatPhase(*ph) for ph in phases), t)
    assert decode(encode(p)) == p


@pytest.mark.parametrize("bad", [
    dict(x=600.0), dict(heading=2 * math.pi), dict(speed=-0.1), dict(speed=100.5), dict(accel=21.0),
    dict(x=float("nan")),
])
def test_kinematic_invariants(bad):
    fields = dict(x=0.0, y=0.0, heading=0.0, speed=1.0, accel=0.0)
    fields.update(bad)
    with pytest.raises(InvariantViolation):
        encode(CamPayload(1, KinematicState(**fields), 0))


def test_sender_zero_reserved():
    with pytest.raises(InvariantViolation):
        encode(CamPayload(0, KinematicState(0, 0, 0, 0, 0), 0))


def test_cpm_object_outside_fov_rejected():
    fov = FieldOfView(0, 0, 0, 50, 0.5)
    obj = PerceivedObject(1, KinematicState(0, 60, 0, 0, 0), 1.0, Classification.VEHICLE)
    with pytest.raises(InvariantViolation):
        encode(CpmPayload(1, fov, (obj,), 0))


def test_cpm_object_limit():
    fov = FieldOfView(0, 0, 0, 50, math.pi)
    obj = PerceivedObject(1, KinematicState(1, 1, 0, 0, 0), 1.0, Classification.VEHICLE)
    encode(CpmPayload(1, fov, (obj,) * 128, 0))
    with pytest.raises(InvariantViolation):
        encode(CpmPayload(1, fov, (obj,) * 129, 0))


def test_duplicate_signal_group_and_lane_rejected():
    with pytest.raises(InvariantViolation):
        encode(SpatPayload(1, (SpatPhase(1, SignalState.RED, 0), SpatPhase(1, SignalState.GREEN, 0)), 0))
    lane = Lane(1, Approach.S, Approach.N, 1)
    with pytest.raises(InvariantViolation):
        encode(MapPayload(1, (lane, lane)))


def test_velocity_helpers_and_heading_normalization():
    s = KinematicState.from_velocity(0, 0, 0.0, -2.0)
    assert s.speed == pytest.approx(2.0)
    assert s.heading == pytest.approx(1.5 * math.pi)
    assert (s.vx, s.vy) == pytest.approx((0.0, -2.0), abs=1e-12)
    assert 0 <= normalize_heading(-1e-18) < 2 * math.pi
    assert normalize_heading(2 * math.pi) == 0.0
