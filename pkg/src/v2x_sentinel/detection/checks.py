"""Per-message checks: security, payload plausibility, stream consistency,
and the CPM/CAM cross-check against the receiver's own sensors."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from ..messages import CamPayload, CpmPayload, FieldOfView, KinematicState
from ..trust import SignedMessage, Verdict, verify
from .reports import Anomaly, DetectionReport, Detector, Source, Track

MAX_PLAUSIBLE_SPEED = 70.0
MAX_PLAUSIBLE_ACCEL = 10.0
TELEPORT_DISTANCE = 50.0


@dataclass(frozen=True)
class Region:
    xmin: float = -150.0
    xmax: float = 150.0
    ymin: float = -150.0
    ymax: float = 150.0

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


def check_security(msg: SignedMessage, root_public_key: bytes, now_ms: int = 0) -> Optional[DetectionReport]:
    verdict = verify(msg, root_public_key)
    if verdict is Verdict.ACCEPT:
        return None
    return DetectionReport(Detector.SECURITY, Anomaly.BAD_SIGNATURE, msg.sender, (msg.digest(),), now_ms,
                           details={"verdict": verdict.value})


def check_plausibility(payload, region: Region, digest: bytes = b"\x00" * 32,
                       now_ms: int = 0) -> Optional[DetectionReport]:
    """Flag physically implausible CAM states or CPM objects."""
    reasons = []
    if isinstance(payload, CamPayload):
        states = [("self", payload.state)]
        source = Source.CAM
    elif isinstance(payload, CpmPayload):
        states = [(o.object_id, o.state) for o in payload.objects]
        source = Source.CPM
        for o in payload.objects:
            if not payload.sensor_fov.contains(o.state.x, o.state.y):
                reasons.append(f"object {o.object_id} outside declared field of view")
    else:
        raise TypeError("plausibility applies to CAM and CPM payloads")
    for label, s in states:
        if s.speed > MAX_PLAUSIBLE_SPEED:
            reasons.append(f"{label}: speed {s.speed:.1f} m/s")
        if abs(s.accel) > MAX_PLAUSIBLE_ACCEL:
            reasons.append(f"{label}: accel {s.accel:.1f} m/s2")
        if not region.contains(s.x, s.y):
            reasons.append(f"{label}: position outside region")
    if not reasons:
        return None
    return DetectionReport(Detector.PLAUSIBILITY, Anomaly.IMPLAUSIBLE_PAYLOAD, payload.sender, (digest,),
                           now_ms, source=source, details={"reasons": "; ".join(reasons)})


def predict_constant_accel(state: KinematicState, dt: float) -> Tuple[float, float]:
    """Position after ``dt`` seconds along the heading, stopping at zero speed."""
    v, a = state.speed, state.accel
    if a < 0.0 and v + a * dt < 0.0:
        dist = v * v / (-2.0 * a) if v > 0.0 else 0.0
    else:
        dist = v * dt + 0.5 * a * dt * dt
    return state.x + dist * math.cos(state.heading), state.y + dist * math.sin(state.heading)


def consistency_gate(dt: float, speed_prev: float) -> float:
    return 0.5 + 0.5 * dt * speed_prev * 0.2


def check_consistency(history: Track, new: CamPayload, digest: bytes = b"\x00" * 32) -> Optional[DetectionReport]:
    """Compare a new CAM with the kinematic prediction from the previous one."""
    if not len(history):
        raise ValueError("consistency check needs a non-empty history")
    t_prev, prev = history.last
    reason = None
    if new.gen_time < t_prev:
        reason = f"genTime went backwards ({new.gen_time} < {t_prev})"
    else:
        jump = math.hypot(new.state.x - prev.x, new.state.y - prev.y)
        dt = (new.gen_time - t_prev) / 1000.0
        px, py = predict_constant_accel(prev, dt)
        err = math.hypot(new.state.x - px, new.state.y - py)
        if jump > TELEPORT_DISTANCE:
            reason = f"teleport of {jump:.1f} m"
        elif err > consistency_gate(dt, prev.speed):
            reason = f"position {err:.2f} m off prediction (gate {consistency_gate(dt, prev.speed):.2f} m)"
    if reason is None:
        return None
    evidence = tuple(d for d in (history.digests[-1], digest) if d)
    return DetectionReport(Detector.CONSISTENCY, Anomaly.INCONSISTENT_STREAM, new.sender, evidence or (digest,),
                           new.gen_time, source=Source.CAM, subject=new.sender, details={"reason": reason})


# --- cross-check against the local sensor -------------------------------------

R_DUP = 1.5
R_ASSOC = 2.0
FOV_MARGIN = 2.0
EGO_EXCLUSION = 3.0


@dataclass(frozen=True)
class LocalObject:
    local_id: int
    x: float
    y: float


@dataclass(frozen=True)
class Finding:
    anomaly: Anomaly
    key: tuple
    offender: int
    evidence: Tuple[bytes, ...]
    source: Source


def _near(x: float, y: float, objects: Iterable[LocalObject], radius: float) -> bool:
    return any(math.hypot(o.x - x, o.y - y) <= radius for o in objects)


def cross_check_cpm(cams: Mapping[int, Tuple[KinematicState, bytes]],
                    cpms: Sequence[Tuple[CpmPayload, bytes]],
                    local_objects: Sequence[LocalObject],
                    local_fov: FieldOfView,
                    ego_xy: Optional[Tuple[float, float]] = None,
                    first_seen: Optional[Mapping[int, int]] = None,
                    min_confidence: float = 0.9) -> List[Finding]:
    """Single-snapshot findings; all inputs refer to the same sensing instant.

    ``cams`` maps StationId to the advertised state and message digest.
    CPM objects below ``min_confidence`` (predicted, not measured) are never
    flagged as ghosts but still count as covering a local object.
    Windowing over consecutive steps is done by :class:`CrossChecker`.
    """
    findings: List[Finding] = []

    def excluded(x, y):
        return ego_xy is not None and math.hypot(x - ego_xy[0], y - ego_xy[1]) <= EGO_EXCLUSION

    # position usurpation: two identities on one occupied spot
    stations = sorted(cams)
    for i, a in enumerate(stations):
        for b in stations[i + 1:]:
            sa, da = cams[a]
            sb, db = cams[b]
            if math.hypot(sa.x - sb.x, sa.y - sb.y) > R_DUP:
                continue
            mx, my = (sa.x + sb.x) / 2, (sa.y + sb.y) / 2
            if not local_fov.contains(mx, my, FOV_MARGIN) or not _near(mx, my, local_objects, R_ASSOC):
                continue
            seen = first_seen or {}
            offender = b if seen.get(b, 0) >= seen.get(a, 0) else a
            findings.append(Finding(Anomaly.POSITION_USURPATION, ("usurp", a, b), offender, (da, db), Source.CAM))

    # ghost: advertised occupancy inside our view that our sensor does not see
    for station in stations:
        s, d = cams[station]
        if excluded(s.x, s.y) or not local_fov.contains(s.x, s.y, FOV_MARGIN):
            continue
        if not _near(s.x, s.y, local_objects, R_ASSOC):
            findings.append(Finding(Anomaly.GHOST, ("ghost", station, None), station, (d,), Source.CAM))
    for cpm, d in cpms:
        for obj in cpm.objects:
            x, y = obj.state.x, obj.state.y
            if obj.confidence < min_confidence or excluded(x, y) or not local_fov.contains(x, y, FOV_MARGIN):
                continue
            if not _near(x, y, local_objects, R_ASSOC):
                findings.append(Finding(Anomaly.GHOST, ("ghost", cpm.sender, obj.object_id), cpm.sender, (d,),
                                        Source.CPM))

    # hijacked vehicle: something we see inside the sender's view is missing from its CPM
    for cpm, d in cpms:
        remote = [LocalObject(o.object_id, o.state.x, o.state.y) for o in cpm.objects]
        for lo in local_objects:
            if not cpm.sensor_fov.contains(lo.x, lo.y, FOV_MARGIN):
                continue
            if not _near(lo.x, lo.y, remote, R_ASSOC):
                findings.append(Finding(Anomaly.HIJACKED_VEHICLE, ("hijacked", cpm.sender, lo.local_id),
                                        cpm.sender, (d,), Source.CPM))
    return findings


class CrossChecker:
    """Applies the consecutive-step window to cross-check findings.

    A key must be found in ``window_k`` consecutive evaluated steps before it
    is reported, and each key is reported once.
    """

    def __init__(self, window_k: int = 3):
        self.window_k = window_k
        self.counts: Dict[tuple, int] = {}
        self.reported: Set[tuple] = set()
        self.first_seen: Dict[int, int] = {}

    def observe(self, now_ms: int, findings: Sequence[Finding]) -> List[DetectionReport]:
        present = {f.key: f for f in findings}
        for key in list(self.counts):
            if key not in present:
                del self.counts[key]
        reports = []
        for key, f in sorted(present.items(), key=lambda kv: repr(kv[0])):
            self.counts[key] = self.counts.get(key, 0) + 1
            if self.counts[key] >= self.window_k and key not in self.reported:
                self.reported.add(key)
                reports.append(DetectionReport(Detector.CROSS_CHECK, f.anomaly, f.offender, f.evidence, now_ms,
                                               source=f.source, subject=key[1:],
                                               details={"consecutive": self.counts[key]}))
        return reports
