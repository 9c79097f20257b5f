"""Command line: ``run``, ``report`` and ``validate``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import FixtureError, SchemaMismatch, V2XError
from .fixture import load_fixture
from .metrics import COLLISION_DISTANCE, simulate
from .world import TRACE_SCHEMA, TRACE_VERSION

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_FIXTURE = 2

log = logging.getLogger("v2x_sentinel")


def cmd_run(args) -> int:
    try:
        fixture = load_fixture(args.fixture, args.set)
    except FixtureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIXTURE
    out = Path(args.out)
    world, metrics = simulate(fixture, trace_enabled=not args.no_trace)
    out.mkdir(parents=True, exist_ok=True)
    world.trace.write(out / "trace.jsonl")
    (out / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"{fixture.name} seed={metrics.seed} reports={metrics.report_count} "
          f"latency_steps={metrics.to_dict()['detection_latency_steps']} fp={metrics.false_positive_count} "
          f"collision={metrics.collision_occurred} -> {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        fixture = load_fixture(args.fixture, args.set)
    except FixtureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIXTURE
    print(f"{fixture.path}: ok ({fixture.name}, {len(fixture.doc['actors'])} actors, "
          f"scenario {fixture.scenario.value})")
    return EXIT_OK


# --- report ------------------------------------------------------------------

def read_trace(path) -> tuple:
    """(header, events) of one trace file.

    Raises:
        SchemaMismatch: line 1 is not a trace header of the supported version.
    """
    with open(path) as fh:
        lines = fh.read().splitlines()
    try:
        header = json.loads(lines[0]) if lines else {}
    except json.JSONDecodeError:
        header = {}
    if header.get("schema") != TRACE_SCHEMA:
        raise SchemaMismatch(f"{path}: not a {TRACE_SCHEMA} file")
    if header.get("version") != TRACE_VERSION:
        raise SchemaMismatch(f"{path}: trace version {header.get('version')} (supported: {TRACE_VERSION})")
    return header, [json.loads(line) for line in lines[1:] if line]


def trace_summary(header: dict, events: List[dict]) -> dict:
    """Per-run KPIs recomputed from a trace alone."""
    step_ms = header.get("step_ms", 100)
    onset = header["onset_ms"] // step_ms if header.get("onset_ms") is not None else None
    detections = [e for e in events if e["kind"] == "detection"]
    fp = len(detections) if onset is None else sum(e["step"] < onset for e in detections)
    latency = {}
    for det in header.get("designated", []):
        steps = [e["step"] - onset for e in detections if e["report"]["detector"] == det and e["step"] >= onset]
        latency[det] = min(steps) if steps else math.inf
    actions = [e["action"] for e in events if e["kind"] == "mitigation"]
    positions: Dict[int, list] = defaultdict(list)
    for e in events:
        if e["kind"] == "state":
            positions[e["step"]].append((e["x"], e["y"]))
    dmin = math.inf
    for pts in positions.values():
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                dmin = min(dmin, math.dist(pts[i], pts[j]))
    return {"fixture": header.get("fixture"), "scenario": header.get("scenario"), "seed": header.get("seed"),
            "fixture_version": header.get("fixture_version"), "latency": latency,
            "first_latency": min(latency.values()) if latency else None, "fp": fp,
            "actions": len(actions), "delivered": sum(a["outcome"] == "delivered" for a in actions),
            "collision": dmin < COLLISION_DISTANCE if positions else None}


def _stats(values: Sequence[float]) -> tuple:
    finite = [v for v in values if v != math.inf]
    if not finite:
        return math.nan, math.nan
    # runs that never detected count as infinite latency in the percentile
    arr = np.array([v if v != math.inf else np.inf for v in values], dtype=float)
    return float(np.mean(finite)), float(np.percentile(arr, 95, method="higher"))


def aggregate(summaries: List[dict]) -> List[dict]:
    """One row per (fixture, detector) plus an ``any`` row using the first designated detector."""
    versions = {(s["fixture"], s["fixture_version"]) for s in summaries}
    by_fixture = defaultdict(set)
    for f, v in versions:
        by_fixture[f].add(v)
    for f, vs in by_fixture.items():
        if len(vs) > 1:
            raise SchemaMismatch(f"traces of fixture {f} mix fixture versions {sorted(vs)}")
    groups = defaultdict(list)
    for s in summaries:
        groups[s["fixture"]].append(s)
    rows = []
    for fixture, runs in sorted(groups.items()):
        dets = sorted({d for r in runs for d in r["latency"]})
        actions = sum(r["actions"] for r in runs)
        delivered = sum(r["delivered"] for r in runs)
        base = {"fixture": fixture, "scenario": runs[0]["scenario"], "runs": len(runs),
                "false_positives": sum(r["fp"] for r in runs),
                "fp_rate": sum(r["fp"] > 0 for r in runs) / len(runs),
                "mitigation_success_rate": delivered / actions if actions else math.nan,
                "collisions": sum(bool(r["collision"]) for r in runs)}
        for det in dets + ["any"] if dets else ["none"]:
            if det == "none":
                lat = []
            elif det == "any":
                lat = [r["first_latency"] for r in runs]
            else:
                lat = [r["latency"][det] for r in runs]
            mean, p95 = _stats(lat) if lat else (math.nan, math.nan)
            rows.append({**base, "detector": det, "detected": sum(v != math.inf for v in lat),
                         "mean_latency_steps": mean, "p95_latency_steps": p95})
    return rows


COLUMNS = ["fixture", "scenario", "detector", "runs", "detected", "mean_latency_steps", "p95_latency_steps",
           "false_positives", "fp_rate", "mitigation_success_rate", "collisions"]


def write_timeline(events_by_run: List[tuple], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "t_ms", "kind", "name", "x", "y", "info"])
        for header, events in events_by_run:
            for e in events:
                if e["kind"] == "state":
                    w.writerow([header.get("seed"), e["t"], "state", e["name"], e["x"], e["y"], e["speed"]])
                elif e["kind"] == "detection":
                    r = e["report"]
                    w.writerow([header.get("seed"), e["t"], "detection", e["name"], "", "",
                                f"{r['detector']}/{r['anomaly']}"])
                elif e["kind"] == "mitigation":
                    w.writerow([header.get("seed"), e["t"], "mitigation", e["name"], "", "",
                                f"{e['action']['kind']}:{e['action']['outcome']}"])


def cmd_report(args) -> int:
    try:
        runs = [read_trace(p) for p in args.traces]
        rows = aggregate([trace_summary(h, ev) for h, ev in runs])
    except SchemaMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIXTURE
    table = [[f"{row[c]:.3g}" if isinstance(row[c], float) else str(row[c]) for c in COLUMNS] for row in rows]
    widths = [max(len(cell) for cell in col) for col in zip(COLUMNS, *table)]
    for cells in [COLUMNS, *table]:
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, COLUMNS)
            w.writeheader()
            w.writerows({c: row[c] for c in COLUMNS} for row in rows)
    if args.timeline:
        write_timeline(runs, args.timeline)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="v2x-sentinel", description="Intersection V2X attack and detection simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario fixture")
    run.add_argument("fixture", help="fixture path or bundled scenario name")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a fixture value, e.g. seed=42 or attack.params.mode=ghost")
    run.add_argument("--out", default=".", help="directory for trace.jsonl and metrics.json")
    run.add_argument("--no-trace", action="store_true", help="keep only detection and mitigation events")
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="aggregate traces across seeds")
    rep.add_argument("traces", nargs="+")
    rep.add_argument("--csv", help="write the summary table as CSV")
    rep.add_argument("--timeline", help="write plot-ready positions and events as CSV")
    rep.set_defaults(func=cmd_report)

    val = sub.add_parser("validate", help="check a fixture without running it")
    val.add_argument("fixture")
    val.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    val.set_defaults(func=cmd_validate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except V2XError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
