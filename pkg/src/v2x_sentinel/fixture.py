"""Scenario fixture files: loading with line-anchored diagnostics, overrides and world assembly.

A fixture is a YAML document::

    version: 1
    name: s3_hacked_spat
    geometry: intersection.yaml        # relative to the fixture file
    sim: {duration_ms: 8000, seed: 7, loss_probability: 0.0, latency_steps: 0}
    light: {name: tl, offset_ms: 0, stages: [{duration_ms: 12000, green: [1, 5]}, ...]}
    rsu: {name: rsu, position: [0, 0], camera: {range: 150}}
    actors:
      - {name: v1, kind: vehicle, lane: S_T, s0: 20, speed: 10}
      - {name: p1, kind: pedestrian, waypoints: [[-11, -30], [-11, 30]], target_speed: 1.4}
    attack: {scenario: s3, onset_ms: 3000, params: {mode: allGreen}}
"""

from __future__ import annotations

import copy
import math
import os
from dataclasses import dataclass
from pathlib import Path as FsPath
from typing import Any, Dict, Mapping, Optional, Sequence

import yaml

from . import attacks
from .agents import CameraAgent, RsuAgent, TrafficLightAgent, VehicleAgent, VehicleCan, VruAgent
from .canbus import DEFAULT_SCHEDULE
from .detection.checks import Region
from .detection.deviation import DeviationConfig
from .detection.ekf import GateConfig
from .errors import FixtureError
from .geometry import Path
from .intersection import Intersection, PhaseProgram
from .messages import FieldOfView
from .trust import Permission, Pki
from .world import Scenario, SimConfig, World

FIXTURE_VERSION = 1
SEED_ENV = "V2X_SENTINEL_SEED"
SCENARIO_DIR = FsPath(__file__).parent / "scenarios"

# designated detectors per scenario; latency counts from the first of these
DESIGNATED = {
    "s1": ("ekfGate", "crossCheck"),
    "s2": ("camPerceptionDeviation", "crossCheck"),
    "s3": ("spatConflict",),
    "s4": ("vruCollision", "camPerceptionDeviation"),
    "s5": ("canTiming", "onboardCamera"),
}

_SHORTHAND = {k: f"sim.{k}" for k in ("seed", "duration_ms", "loss_probability", "latency_steps",
                                      "cpm_every", "spat_every")}
_SHORTHAND.update(onset_ms="attack.onset_ms")


class _Map(dict):
    line = 0
    key_lines: Dict[str, int]


class _Seq(list):
    line = 0


class _LineLoader(yaml.SafeLoader):
    pass


def _construct_map(loader, node):
    loader.flatten_mapping(node)
    out = _Map()
    out.line = node.start_mark.line + 1
    out.key_lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        out[key] = loader.construct_object(v_node, deep=True)
        out.key_lines[key] = k_node.start_mark.line + 1
    return out


def _construct_seq(loader, node):
    out = _Seq(loader.construct_object(n, deep=True) for n in node.value)
    out.line = node.start_mark.line + 1
    return out


_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_map)
_LineLoader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_SEQUENCE_TAG, _construct_seq)


def _line(node, key=None) -> Optional[int]:
    if key is not None and isinstance(node, _Map) and key in node.key_lines:
        return node.key_lines[key]
    return getattr(node, "line", None) or None


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    return obj


def read_yaml(path) -> Any:
    path = FsPath(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FixtureError(f"cannot read fixture: {exc.strerror}", path=str(path)) from None
    try:
        return yaml.load(text, Loader=_LineLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise FixtureError(f"YAML syntax: {getattr(exc, 'problem', exc)}", line=mark.line + 1 if mark else None,
                           path=str(path)) from None


class _Checker:
    def __init__(self, path: str):
        self.path = path

    def fail(self, msg, node=None, key=None):
        raise FixtureError(msg, line=_line(node, key), path=self.path)

    def mapping(self, node, where, required=(), optional=()):
        if not isinstance(node, dict):
            self.fail(f"{where}: expected a mapping", node)
        allowed = set(required) | set(optional)
        for k in node:
            if k not in allowed:
                self.fail(f"{where}: unknown key {k!r}", node, k)
        for k in required:
            if k not in node:
                self.fail(f"{where}: missing key {k!r}", node)
        return node

    def number(self, node, key, where, lo=-math.inf, hi=math.inf, integer=False, lo_open=False, hi_open=False):
        v = node[key]
        ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
        if isinstance(v, bool) or not ok_type:
            self.fail(f"{where}.{key}: expected {'an integer' if integer else 'a number'}, got {v!r}", node, key)
        if v < lo or v > hi or (lo_open and v == lo) or (hi_open and v == hi):
            lo_b, hi_b = "(" if lo_open else "[", ")" if hi_open else "]"
            self.fail(f"{where}.{key}: {v} outside {lo_b}{lo}, {hi}{hi_b}", node, key)
        return v

    def opt_number(self, node, key, where, **kw):
        if key in node:
            self.number(node, key, where, **kw)

    def seq(self, node, key, where, min_len=0):
        v = node[key]
        if not isinstance(v, list) or len(v) < min_len:
            self.fail(f"{where}.{key}: expected a list of at least {min_len} entries", node, key)
        return v


def validate_document(doc, path: str = "<fixture>") -> None:
    """Structural and range checks; raises FixtureError with a line number."""
    c = _Checker(path)
    c.mapping(doc, "fixture", required=("version", "name", "geometry", "sim", "light", "rsu", "actors"),
              optional=("attack", "detection", "description"))
    if doc["version"] != FIXTURE_VERSION:
        c.fail(f"fixture.version: unsupported version {doc['version']!r}", doc, "version")
    sim = c.mapping(doc["sim"], "sim", required=("duration_ms",),
                    optional=("seed", "loss_probability", "latency_steps", "cpm_every", "spat_every"))
    c.number(sim, "duration_ms", "sim", lo=100, integer=True)
    c.opt_number(sim, "seed", "sim", lo=0, hi=2 ** 64 - 1, integer=True)
    c.opt_number(sim, "loss_probability", "sim", lo=0.0, hi=1.0, hi_open=True)
    c.opt_number(sim, "latency_steps", "sim", lo=0, integer=True)
    c.opt_number(sim, "cpm_every", "sim", lo=1, integer=True)
    c.opt_number(sim, "spat_every", "sim", lo=1, integer=True)

    light = c.mapping(doc["light"], "light", required=("stages",),
                      optional=("name", "station_id", "offset_ms", "honor_probability"))
    for i, st in enumerate(c.seq(light, "stages", "light", 1)):
        c.mapping(st, f"light.stages[{i}]", required=("duration_ms",), optional=("green", "yellow"))
        c.number(st, "duration_ms", f"light.stages[{i}]", lo=100, integer=True)
    c.opt_number(light, "honor_probability", "light", lo=0.0, hi=1.0)
    c.opt_number(light, "station_id", "light", lo=0, hi=2 ** 32 - 1, integer=True)

    rsu = c.mapping(doc["rsu"], "rsu", optional=("name", "station_id", "position", "camera", "uwb_sigma"))
    if "camera" in rsu:
        cam = c.mapping(rsu["camera"], "rsu.camera",
                        optional=("range", "sigma_pos", "sigma_vel", "detection_probability"))
        c.opt_number(cam, "range", "rsu.camera", lo=0.0, lo_open=True)
        c.opt_number(cam, "detection_probability", "rsu.camera", lo=0.0, hi=1.0)
        c.opt_number(cam, "sigma_pos", "rsu.camera", lo=0.0)
        c.opt_number(cam, "sigma_vel", "rsu.camera", lo=0.0)
    c.opt_number(rsu, "uwb_sigma", "rsu", lo=0.0)
    c.opt_number(rsu, "station_id", "rsu", lo=0, hi=2 ** 32 - 1, integer=True)

    names = set()
    for i, a in enumerate(c.seq(doc, "actors", "fixture", 0)):
        where = f"actors[{i}]"
        c.mapping(a, where, required=("name", "kind"),
                  optional=("station_id", "lane", "waypoints", "s0", "speed", "target_speed", "spawn_ms",
                            "start_ms", "start_accel", "can", "send_cpm"))
        if a["name"] in names:
            c.fail(f"{where}.name: duplicate actor name {a['name']!r}", a, "name")
        names.add(a["name"])
        kind = a["kind"]
        if kind == "vehicle":
            if "lane" not in a:
                c.fail(f"{where}: vehicles need a 'lane'", a)
        elif kind in ("pedestrian", "cyclist"):
            if "waypoints" not in a:
                c.fail(f"{where}: VRUs need 'waypoints'", a)
            pts = c.seq(a, "waypoints", where, 2)
            for p in pts:
                if not (isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) for v in p)):
                    c.fail(f"{where}.waypoints: each point must be [x, y]", pts)
            c.opt_number(a, "target_speed", where, lo=0.0, hi=3.0)
        else:
            c.fail(f"{where}.kind: expected vehicle, pedestrian or cyclist, got {kind!r}", a, "kind")
        c.opt_number(a, "speed", where, lo=0.0, hi=100.0)
        c.opt_number(a, "s0", where, lo=0.0)
        c.opt_number(a, "spawn_ms", where, lo=0, integer=True)
        c.opt_number(a, "start_ms", where, lo=0, integer=True)
        c.opt_number(a, "station_id", where, lo=0, hi=2 ** 32 - 1, integer=True)

    if "attack" in doc:
        at = c.mapping(doc["attack"], "attack", required=("scenario", "onset_ms"), optional=("params",))
        if at["scenario"] not in attacks.ATTACK_NAMES:
            c.fail(f"attack.scenario: expected one of {sorted(attacks.ATTACK_NAMES)}, got {at['scenario']!r}",
                   at, "scenario")
        c.number(at, "onset_ms", "attack", lo=0, hi=sim["duration_ms"], integer=True, hi_open=True)
        if at["onset_ms"] % 100:
            c.fail("attack.onset_ms: must be a multiple of the 100 ms step", at, "onset_ms")
        params = at.get("params", {})
        if not isinstance(params, dict):
            c.fail("attack.params: expected a mapping", at, "params")
        for key in ("actor", "victim"):
            if key in params and params[key] not in names:
                c.fail(f"attack.params.{key}: no actor named {params[key]!r}", params, key)
    if "detection" in doc:
        det = c.mapping(doc["detection"], "detection",
                        optional=("window_k", "confidence", "q", "horizon_s", "d_min", "n_sigma"))
        c.opt_number(det, "window_k", "detection", lo=1, integer=True)
        c.opt_number(det, "confidence", "detection", lo=0.0, hi=1.0, lo_open=True, hi_open=True)


def _apply_override(doc: dict, item: str, path: str) -> None:
    if "=" not in item:
        raise FixtureError(f"override {item!r}: expected key=value", path=path)
    key, raw = item.split("=", 1)
    key = _SHORTHAND.get(key.strip(), key.strip())
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    node = doc
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node, dict):
            raise FixtureError(f"override {item!r}: {p!r} is not a section", path=path)
        node = node.setdefault(p, {})
    node[parts[-1]] = value


@dataclass
class Fixture:
    path: FsPath
    doc: Dict[str, Any]
    intersection: Intersection

    @property
    def name(self) -> str:
        return self.doc["name"]

    @property
    def sim(self) -> Dict[str, Any]:
        return self.doc["sim"]

    @property
    def attack(self) -> Optional[attacks.AttackScript]:
        at = self.doc.get("attack")
        if not at:
            return None
        return attacks.AttackScript(at["scenario"], int(at["onset_ms"]), dict(at.get("params", {})))

    @property
    def scenario(self) -> Scenario:
        at = self.doc.get("attack")
        return Scenario(at["scenario"]) if at else Scenario.CLEAN

    @property
    def seed(self) -> int:
        return int(self.sim.get("seed", 0))

    def config(self) -> SimConfig:
        s = self.sim
        return SimConfig(int(s["duration_ms"]), self.seed, float(s.get("loss_probability", 0.0)),
                         int(s.get("latency_steps", 0)), self.scenario, cpm_every=int(s.get("cpm_every", 1)),
                         spat_every=int(s.get("spat_every", 10)))


def resolve_fixture(ref) -> FsPath:
    """A path, or the name of a bundled scenario (with or without directory and suffix)."""
    p = FsPath(ref)
    if p.is_file():
        return p
    for cand in (p.with_suffix(".yaml"), SCENARIO_DIR / p.name, SCENARIO_DIR / (p.name + ".yaml")):
        if cand.is_file():
            return cand
    raise FixtureError("no such fixture", path=str(ref))


def load_fixture(ref, overrides: Sequence[str] = (), env: Optional[Mapping[str, str]] = None) -> Fixture:
    """Parse, override and validate a fixture.

    Seed precedence, lowest first: the fixture, the ``V2X_SENTINEL_SEED``
    environment variable, then ``--set`` overrides.
    """
    path = resolve_fixture(ref)
    doc = read_yaml(path)
    validate_document(doc, str(path))
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            doc["sim"]["seed"] = int(env[SEED_ENV], 0)
        except ValueError:
            raise FixtureError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer", path=str(path)) from None
    if overrides:
        doc = _plain(doc)
        for item in overrides:
            _apply_override(doc, item, str(path))
        validate_document(doc, f"{path} (after --set)")
    doc = copy.deepcopy(_plain(doc))
    geo_path = (path.parent / doc["geometry"]).resolve()
    geo = read_yaml(geo_path)
    try:
        intersection = Intersection.from_dict(_plain(geo))
    except (KeyError, TypeError, ValueError) as exc:
        raise FixtureError(f"bad geometry: {exc}", line=_line(geo), path=str(geo_path)) from None
    for a in doc["actors"]:
        if a["kind"] == "vehicle" and a["lane"] not in intersection.names:
            raise FixtureError(f"actor {a['name']}: unknown lane {a['lane']!r}", path=str(path))
    return Fixture(path, doc, intersection)


def default_station_ids(fixture: Fixture) -> Dict[str, int]:
    doc = fixture.doc
    ids = {doc["light"].get("name", "tl"): doc["light"].get("station_id", 1),
           doc["rsu"].get("name", "rsu"): doc["rsu"].get("station_id", 2)}
    for i, a in enumerate(doc["actors"]):
        ids[a["name"]] = a.get("station_id", 100 + i)
    return ids


def build_world(fixture: Fixture, trace_enabled: bool = True,
                station_ids: Optional[Mapping[str, int]] = None, attack: bool = True) -> World:
    """Instantiate every agent of ``fixture``; ``attack=False`` gives the same run without the attacker."""
    doc = fixture.doc
    cfg = fixture.config()
    ids = dict(default_station_ids(fixture))
    ids.update(station_ids or {})
    script = fixture.attack
    header = {"seed": cfg.seed, "scenario": cfg.scenario.value, "fixture": fixture.name,
              "fixture_version": doc["version"], "step_ms": cfg.step_ms,
              "onset_ms": script.onset_ms if script is not None and attack else None,
              "designated": list(DESIGNATED.get(script.scenario, ())) if script is not None and attack else []}
    world = World(cfg, trace_enabled, header)
    world.fixture = fixture
    pki = Pki(b"v2x-sentinel|" + str(cfg.seed).encode())
    world.root_public_key = pki.root_public_key
    inter = fixture.intersection
    det = doc.get("detection", {})
    window_k = int(det.get("window_k", 3))
    gate = GateConfig(confidence=float(det.get("confidence", 0.99)), window_k=window_k, q=float(det.get("q", 0.5)))

    lt = doc["light"]
    lname = lt.get("name", "tl")
    program = PhaseProgram.from_dict(inter.signal_groups, {"stages": lt["stages"], "offset_ms": lt.get("offset_ms", 0)})
    light = TrafficLightAgent(lname, ids[lname], pki.enroll(ids[lname], [Permission.SEND_SPAT, Permission.SEND_MAP],
                                                            lname),
                              program, float(lt.get("honor_probability", 0.0)))
    world.add(light)

    r = doc["rsu"]
    rname = r.get("name", "rsu")
    pos = tuple(r.get("position", (0.0, 0.0)))
    cam_cfg = r.get("camera", {})
    camera = CameraAgent(FieldOfView(pos[0], pos[1], 0.0, float(cam_cfg.get("range", 150.0)), math.pi),
                         float(cam_cfg.get("sigma_pos", 0.5)), float(cam_cfg.get("sigma_vel", 0.15)),
                         float(cam_cfg.get("detection_probability", 0.98)))
    rsu = RsuAgent(rname, ids[rname], pki.enroll(ids[rname], [Permission.SEND_CPM, Permission.SEND_DENM], rname),
                   camera, inter.conflict_matrix(), light, pos, Region(), window_k, float(r.get("uwb_sigma", 0.3)),
                   DeviationConfig(n_sigma=float(det.get("n_sigma", 3.0)), window_k=window_k),
                   float(det.get("horizon_s", 4.0)), float(det.get("d_min", 2.0)))
    world.add(rsu)

    vehicle_perms = [Permission.SEND_CAM, Permission.SEND_CPM, Permission.SEND_DENM]
    for i, a in enumerate(doc["actors"]):
        name = a["name"]
        station = ids[name]
        hsm = pki.enroll(station, vehicle_perms if a["kind"] == "vehicle" else [Permission.SEND_DENM], name)
        if a["kind"] == "vehicle":
            speed = float(a.get("speed", 10.0))
            agent = VehicleAgent(name, station, hsm, inter.lane(a["lane"]), float(a.get("s0", 0.0)), speed,
                                 float(a.get("target_speed", speed)), int(a.get("spawn_ms", 0)), i + 1,
                                 Region(), gate, window_k, bool(a.get("send_cpm", False)))
        else:
            agent = VruAgent(name, station, hsm, Path(tuple(tuple(map(float, p)) for p in a["waypoints"])),
                             float(a.get("s0", 0.0)), float(a.get("speed", 0.0)), float(a.get("target_speed", 1.4)),
                             int(a.get("spawn_ms", 0)), i + 1, int(a.get("start_ms", 0)),
                             float(a.get("start_accel", 0.7)), a["kind"], tag_id=i + 1)
        world.add(agent)
        if a["kind"] == "vehicle" and a.get("can", False):
            agent.can = VehicleCan(world, name, cfg.duration_ms)

    world.attack_script = script
    if script is not None and attack:
        _arm(world, script, fixture)
    return world


def _arm(world: World, script: attacks.AttackScript, fixture: Fixture) -> None:
    p = script.params
    onset = script.onset_ms
    rsu = next(a for a in world.agents if isinstance(a, RsuAgent))
    light = next(a for a in world.agents if isinstance(a, TrafficLightAgent))
    sc = script.scenario
    if sc == "s1":
        mode = attacks.CpmMode(p.get("mode", "falsify"))
        target = p.get("target")
        target_id = world.agent(target).object_id if target else None
        rsu.cpm_attack = attacks.MaliciousCpm(onset, mode, target_id, tuple(p.get("ghost_xy", (0.0, 0.0))),
                                              float(p.get("ghost_heading", math.pi / 2)))
    elif sc in ("s2", "s4"):
        attacks.inject_hacked_vehicle(world.agent(p["actor"]), onset)
    elif sc == "s3":
        mode = attacks.SpatMode(p.get("mode", "allGreen"))
        groups = ()
        if mode is attacks.SpatMode.CONFLICTING_PAIR:
            groups = attacks.conflicting_pair(rsu.cm, tuple(p["groups"]) if "groups" in p else None)
        light.spat_attack = attacks.HackedSpat(onset, mode, tuple(groups))
    elif sc == "s5":
        vehicle = world.agent(p["actor"])
        mode = p.get("mode", "onboard")
        if mode == "onboard":
            attacks.inject_onboard_compromise(vehicle, onset)
        else:
            if vehicle.can is None:
                raise FixtureError(f"attack.params.actor: {vehicle.name} has no CAN bus", path=str(fixture.path))
            vehicle.can.frames = attacks.inject_can_attack(
                vehicle.can.frames, attacks.CanMode(mode), onset, world.config.duration_ms + 200,
                world.rng(f"attack:can:{vehicle.name}"), int(p.get("target_id", 0x100)),
                float(p.get("rate_multiplier", 10.0)), DEFAULT_SCHEDULE)
