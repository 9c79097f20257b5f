"""Security notification routing: detection reports to mitigation actions."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import UnmappedAnomaly
from .messages import DenmCause
from .detection.reports import Anomaly, DetectionReport, Detector, Source


class ActionKind(str, Enum):
    BROADCAST_DENM = "broadcastDenm"
    REQUEST_LIGHT_OVERRIDE = "requestLightOverride"
    HMI_NOTIFY = "hmiNotify"
    PURGE_OWN_KEYS = "purgeOwnKeys"


class Outcome(str, Enum):
    DELIVERED = "delivered"
    IGNORED = "ignored"
    PENDING = "pending"


class OverrideTarget(str, Enum):
    RED_YELLOW_BLINKING = "redYellowBlinking"
    ALL_RED = "allRed"


class Role(str, Enum):
    VEHICLE = "vehicle"
    RSU = "rsu"


@dataclass
class MitigationAction:
    kind: ActionKind
    payload: Dict[str, Any] = field(default_factory=dict)
    issued_at_ms: int = 0
    outcome: Outcome = Outcome.PENDING

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "outcome": self.outcome.value, "issuedAtMs": self.issued_at_ms,
                **{k: (v.value if isinstance(v, Enum) else v) for k, v in self.payload.items()}}


Step = Tuple[ActionKind, Dict[str, Any]]

_DENM = (ActionKind.BROADCAST_DENM, {})
_HMI = (ActionKind.HMI_NOTIFY, {})
_PURGE = (ActionKind.PURGE_OWN_KEYS, {})


def _override(target: OverrideTarget) -> Step:
    return ActionKind.REQUEST_LIGHT_OVERRIDE, {"target": target}


_BLINK = _override(OverrideTarget.RED_YELLOW_BLINKING)


def default_table() -> Dict[Role, Dict[Anomaly, List[Step]]]:
    vehicle = {
        Anomaly.BAD_SIGNATURE: [_HMI],
        Anomaly.IMPLAUSIBLE_PAYLOAD: [_DENM],
        Anomaly.INCONSISTENT_STREAM: [_DENM],
        Anomaly.POSITION_USURPATION: [_DENM],
        Anomaly.GHOST: [_DENM],
        Anomaly.HIJACKED_VEHICLE: [_DENM],
        Anomaly.CONFLICTING_GREENS: [_DENM],
        Anomaly.STOP_LIE: [_DENM],
        Anomaly.IMMINENT_COLLISION: [_HMI],
        Anomaly.CAN_DOS: [_DENM, _PURGE],
        Anomaly.CAN_INJECTION: [_DENM, _PURGE],
        Anomaly.ADVERSARIAL_INPUT: [_DENM, _PURGE],
    }
    rsu = {
        Anomaly.BAD_SIGNATURE: [_HMI],
        Anomaly.IMPLAUSIBLE_PAYLOAD: [_DENM],
        Anomaly.INCONSISTENT_STREAM: [_DENM],
        Anomaly.POSITION_USURPATION: [_DENM, _BLINK],
        Anomaly.GHOST: [_DENM, _BLINK],
        Anomaly.HIJACKED_VEHICLE: [_DENM, _BLINK],
        Anomaly.CONFLICTING_GREENS: [_DENM, _BLINK],
        Anomaly.STOP_LIE: [_DENM, _BLINK],
        Anomaly.IMMINENT_COLLISION: [_HMI, _override(OverrideTarget.ALL_RED)],
        Anomaly.CAN_DOS: [_DENM],
        Anomaly.CAN_INJECTION: [_DENM],
        Anomaly.ADVERSARIAL_INPUT: [_DENM],
    }
    return {Role.VEHICLE: vehicle, Role.RSU: rsu}


class MitigationPolicy:
    """Ordered action list per (role, anomaly), optionally refined per detector.

    ``overrides`` maps ``(role, detector or None, anomaly)`` to a list of steps;
    a detector-specific entry wins over the anomaly-wide one.
    """

    def __init__(self, table: Optional[Mapping[Role, Mapping[Anomaly, Sequence[Step]]]] = None,
                 overrides: Optional[Mapping[Tuple[Role, Optional[Detector], Anomaly], Sequence[Step]]] = None):
        self.table = {r: dict(m) for r, m in (table if table is not None else default_table()).items()}
        self.overrides = dict(overrides or {})

    def validate(self) -> None:
        """Raises UnmappedAnomaly unless every role maps every anomaly to at least one action."""
        for role, mapping in self.table.items():
            for anomaly in Anomaly:
                if not mapping.get(anomaly):
                    raise UnmappedAnomaly(f"{role.value}: no action for {anomaly.value}")

    def steps(self, role: Role, detector: Detector, anomaly: Anomaly) -> List[Step]:
        for key in ((role, detector, anomaly), (role, None, anomaly)):
            if key in self.overrides:
                return list(self.overrides[key])
        steps = self.table.get(role, {}).get(anomaly)
        if not steps:
            raise UnmappedAnomaly(f"{role.value}: no action for {detector.value}/{anomaly.value}")
        return list(steps)


def denm_cause(report: DetectionReport) -> DenmCause:
    """Cause code a DENM carries for ``report``."""
    a = report.anomaly
    if a in (Anomaly.CAN_DOS, Anomaly.CAN_INJECTION):
        return DenmCause.CAN_INTRUSION
    if a is Anomaly.ADVERSARIAL_INPUT:
        return DenmCause.ONBOARD_COMPROMISE
    if a is Anomaly.CONFLICTING_GREENS:
        return DenmCause.HACKED_TRAFFIC_LIGHT
    if a is Anomaly.IMMINENT_COLLISION:
        return DenmCause.VRU_COLLISION
    if a is Anomaly.STOP_LIE:
        return DenmCause.HACKED_VEHICLE
    if report.detector is Detector.EKF_GATE or report.source is Source.CPM:
        return DenmCause.MALICIOUS_CPM
    return DenmCause.HACKED_VEHICLE


def route(report: DetectionReport, policy: MitigationPolicy, role: Role) -> List[MitigationAction]:
    """Actions mandated for ``report``; a purge is always moved behind any DENM."""
    actions = []
    for kind, params in policy.steps(role, report.detector, report.anomaly):
        payload = dict(params)
        if kind is ActionKind.BROADCAST_DENM:
            payload.setdefault("cause", denm_cause(report))
        if kind is ActionKind.HMI_NOTIFY and report.anomaly is Anomaly.IMMINENT_COLLISION:
            payload.setdefault("cause", DenmCause.VRU_COLLISION)
        actions.append(MitigationAction(kind, payload, report.sim_time_ms))
    actions.sort(key=lambda a: a.kind is ActionKind.PURGE_OWN_KEYS)
    return actions


def request_light_override(light, target: OverrideTarget) -> Outcome:
    """Ask ``light`` to switch to ``target``; a hacked controller may refuse."""
    return light.request_override(OverrideTarget(target))
