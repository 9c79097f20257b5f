import math

import numpy as np
import pytest

from v2x_sentinel import attacks
from v2x_sentinel.attacks import (AttackScript, CanMode, CpmMode, SpatMode, conflicting_pair, gentle_stop_profile,
                                  inject_can_attack, inject_hacked_spat, inject_malicious_cpm)
from v2x_sentinel.canbus import DEFAULT_SCHEDULE, generate_arrays
from v2x_sentinel.detection.checks import check_consistency
from v2x_sentinel.detection.reports import Source, Track
from v2x_sentinel.detection.spat import check_spat_conflicts
from v2x_sentinel.fixture import build_world, load_fixture
from v2x_sentinel.intersection import Intersection, canonical_layout
from v2x_sentinel.messages import (CamPayload, Classification, CpmPayload, FieldOfView, KinematicState,
                                   PerceivedObject, SignalState, SpatPayload, SpatPhase)

CM = Intersection.from_dict(canonical_layout()).conflict_matrix()


def test_script_validation():
    AttackScript("s1", 1000).validate(5000)
    with pytest.raises(ValueError):
        AttackScript("s9", 1000).validate(5000)
    with pytest.raises(ValueError):
        AttackScript("s1", 5000).validate(5000)


# --- malicious CPM ---------------------------------------------------------------

def base_cpm():
    fov = FieldOfView(0, 0, 0, 100, math.pi)
    objs = tuple(PerceivedObject(i, KinematicState(i * 5.0, 1, 0, 8, 0), 1.0, Classification.VEHICLE)
                 for i in (1, 2))
    return CpmPayload(2, fov, objs, 700)


def test_falsify_zeroes_target_speed_in_place():
    out = inject_malicious_cpm(base_cpm(), CpmMode.FALSIFY, target_object_id=2)
    target = next(o for o in out.objects if o.object_id == 2)
    assert (target.state.x, target.state.y, target.state.speed) == (10.0, 1.0, 0.0)
    assert out.objects[0] == base_cpm().objects[0]
    assert out.gen_time == 700 and out.sender == 2


def test_ghost_adds_one_object_and_suppress_drops_target():
    ghost = PerceivedObject(999, KinematicState(3, 3, 0, 0, 0), 1.0, Classification.VEHICLE)
    out = inject_malicious_cpm(base_cpm(), CpmMode.GHOST, ghost_object=ghost)
    assert [o.object_id for o in out.objects] == [1, 2, 999]
    assert inject_malicious_cpm(out, CpmMode.GHOST, ghost_object=ghost) == out
    with pytest.raises(ValueError):
        inject_malicious_cpm(base_cpm(), CpmMode.GHOST)
    out = inject_malicious_cpm(base_cpm(), CpmMode.SUPPRESS, target_object_id=1)
    assert [o.object_id for o in out.objects] == [2]


# --- hacked vehicle --------------------------------------------------------------

def test_gentle_stop_profile_closed_form():
    # 12 m/s, 36 m to the line: a = 2 m/s2, stop after 6 s
    assert gentle_stop_profile(0, 12, 36, 0) == (0, 12, -2.0)
    assert gentle_stop_profile(0, 12, 36, 3) == pytest.approx((27.0, 6.0, -2.0))
    assert gentle_stop_profile(0, 12, 36, 7) == (36, 0.0, 0.0)
    assert gentle_stop_profile(40, 12, 36, 1) == (40, 0.0, 0.0)


def test_fake_stop_stream_passes_consistency():
    track = Track(7, Source.CAM)
    for k in range(80):
        s, v, a = gentle_stop_profile(0.0, 12.0, 36.0, k * 0.1)
        cam = CamPayload(7, KinematicState(0.0, s, math.pi / 2, v, a), k * 100)
        if len(track):
            assert check_consistency(track, cam) is None, k
        track.append(cam.gen_time, cam.state, b"\x01" * 32)


# --- hacked SPaT -------------------------------------------------------------------

def red_spat():
    return SpatPayload(1, tuple(SpatPhase(g, SignalState.RED, 5000) for g in range(1, 9)), 0)


def test_all_green_conflicts():
    spat = inject_hacked_spat(red_spat(), SpatMode.ALL_GREEN)
    assert all(p.state is SignalState.GREEN for p in spat.phases)
    assert check_spat_conflicts(spat, CM) is not None


def test_conflicting_pair_versus_compatible_pair():
    assert check_spat_conflicts(inject_hacked_spat(red_spat(), SpatMode.CONFLICTING_PAIR, (1, 3)), CM) is not None
    assert check_spat_conflicts(inject_hacked_spat(red_spat(), SpatMode.CONFLICTING_PAIR, (1, 5)), CM) is None
    assert conflicting_pair(CM, (1, 3)) == (1, 3)
    assert CM.conflict(*conflicting_pair(CM))
    with pytest.raises(ValueError):
        conflicting_pair(CM, (1, 5))


# --- CAN -----------------------------------------------------------------------------

ONSET, END = 5000.0, 10000.0


@pytest.fixture(scope="module")
def benign():
    return generate_arrays(DEFAULT_SCHEDULE, END, seed=21)


def test_dos_flood_dominates_the_bus(benign):
    out = inject_can_attack(benign, CanMode.DOS_FLOOD, ONSET, END, np.random.default_rng(1))
    after = out.ids[out.t >= ONSET]
    share = np.mean(after == 0)
    # 10x the fastest rate (1000 fps) against 195 fps of benign traffic
    expected = 1000 / (1000 + DEFAULT_SCHEDULE.frames_per_second)
    assert share > 0.80
    assert share == pytest.approx(expected, abs=0.01)
    assert not np.any(out.ids[out.t < ONSET] == 0)


def test_injection_halves_target_period(benign):
    out = inject_can_attack(benign, CanMode.INJECTION, ONSET, END, np.random.default_rng(1), target_id=0x100)
    before = np.median(np.diff(out.t[(out.ids == 0x100) & (out.t < ONSET)]))
    after = np.median(np.diff(out.t[(out.ids == 0x100) & (out.t >= ONSET)]))
    assert after == pytest.approx(before / 2, rel=0.05)
    assert np.all(np.diff(out.t) >= 0)


def test_data_modification_keeps_timing(benign):
    out = inject_can_attack(benign, CanMode.DATA_MODIFICATION, ONSET, END, np.random.default_rng(1))
    assert np.array_equal(out.t, benign.t) and np.array_equal(out.ids, benign.ids)
    hit = (benign.ids == 0x100) & (benign.t >= ONSET)
    assert np.array_equal(out.data[hit, 0], benign.data[hit, 0] ^ 0xFF)
    assert np.array_equal(out.data[~hit], benign.data[~hit])


# --- run-level behaviour --------------------------------------------------------------

def test_onboard_compromise_denm_then_silence(run):
    world, metrics = run("s5_onboard")
    ego = world.agent("ego")
    onset = metrics.onset_step
    tx = [e for e in world.trace.of_kind("tx") if e["station"] == ego.station]
    denm = [e for e in tx if e["type"] == "DENM"]
    assert denm and denm[0]["step"] - onset <= 1
    purge = [e for e in world.trace.of_kind("mitigation")
             if e["station"] == ego.station and e["action"]["kind"] == "purgeOwnKeys"]
    assert purge and purge[0]["step"] == denm[0]["step"]
    assert all(e["step"] <= purge[0]["step"] for e in tx)
    assert ego.hsm.purged


SCENARIOS = ["s1_malicious_cpm", "s2_hacked_vehicle", "s3_hacked_spat", "s4_vru", "s5_onboard"]


@pytest.mark.parametrize("name", SCENARIOS)
def test_runs_match_attack_free_twin_before_onset(name):
    fx = load_fixture(name, env={})
    armed, twin = build_world(fx), build_world(fx, attack=False)
    armed.run()
    twin.run()
    onset = fx.attack.onset_ms // armed.config.step_ms

    def prefix(w):
        return [e for e in w.trace.events if e["step"] < onset]

    assert prefix(armed) == prefix(twin)
    assert len(prefix(armed)) > 0
    assert armed.trace.events != twin.trace.events


def test_hacked_vehicle_fake_state_anchors_once():
    world = build_world(load_fixture("s2_hacked_vehicle", env={}))
    hijack = world.agent("hijacked").hijack
    assert isinstance(hijack, attacks.HackedVehicle)
    world.run()
    car = world.agent("hijacked")
    t0, s0, v0 = hijack._anchor
    assert t0 == hijack.onset_ms and v0 > 0
    # physically it never stopped at the line
    assert car.s > car.stop_s or car.despawned
