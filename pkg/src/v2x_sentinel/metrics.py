"""Per-run KPIs and the simulation runner that collects them."""

from __future__ import annotations

import itertools
import math
import time
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, Optional

from .fixture import DESIGNATED, Fixture, build_world
from .world import World

COLLISION_DISTANCE = 1.0


@dataclass
class RunMetrics:
    scenario: str
    seed: int
    fixture: str
    onset_step: Optional[int]
    detection_latency_steps: Optional[float]
    latency_by_detector: Dict[str, Optional[int]]
    false_positive_count: int
    report_count: int
    mitigation_outcomes: Dict[str, int]
    collision_occurred: bool
    min_distance_m: float
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["detection_latency_steps"] == math.inf:
            d["detection_latency_steps"] = None
        return d


def min_pair_distance(world: World) -> float:
    actors = world.active_physical()
    best = math.inf
    for a, b in itertools.combinations(actors, 2):
        sa, sb = a.state, b.state
        best = min(best, math.hypot(sa.x - sb.x, sa.y - sb.y))
    return best


def compute_metrics(world: World, min_distance: float, runtime_s: float = 0.0) -> RunMetrics:
    script = getattr(world, "attack_script", None)
    armed = script is not None and getattr(world, "attack_armed", True)
    step_ms = world.config.step_ms
    onset = script.onset_ms // step_ms if armed else None
    reports = world.reports
    if onset is None:
        fp = len(reports)
    else:
        fp = sum(1 for k, _, _ in reports if k < onset)
    by_det: Dict[str, Optional[int]] = {}
    latency: Optional[float] = None
    if onset is not None:
        latency = math.inf
        for det in DESIGNATED[script.scenario]:
            steps = [k - onset for k, _, r in reports if r.detector.value == det and k >= onset]
            by_det[det] = min(steps) if steps else None
            if steps:
                latency = min(latency, min(steps))
    outcomes = Counter(f"{e['action']['kind']}:{e['action']['outcome']}" for e in world.trace.of_kind("mitigation"))
    return RunMetrics(world.config.scenario.value, world.config.seed, getattr(world, "fixture").name, onset, latency,
                      by_det, fp, len(reports), dict(sorted(outcomes.items())), min_distance < COLLISION_DISTANCE,
                      min_distance, runtime_s)


def simulate(fixture: Fixture, trace_enabled: bool = True, station_ids=None, attack: bool = True):
    """Build and run ``fixture``; returns (world, metrics)."""
    t0 = time.perf_counter()
    world = build_world(fixture, trace_enabled, station_ids, attack)
    world.attack_armed = attack
    dmin = math.inf
    for _ in range(world.config.steps):
        world.step()
        dmin = min(dmin, min_pair_distance(world))
    return world, compute_metrics(world, dmin, time.perf_counter() - t0)
