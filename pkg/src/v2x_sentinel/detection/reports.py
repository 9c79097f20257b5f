"""Detection report record and the Track history buffer shared by detectors."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Deque, Dict, Optional, Tuple

from ..messages import KinematicState

TRACK_CAPACITY = 32


class Detector(str, Enum):
    SECURITY = "security"
    PLAUSIBILITY = "plausibility"
    CONSISTENCY = "consistency"
    CROSS_CHECK = "crossCheck"
    EKF_GATE = "ekfGate"
    SPAT_CONFLICT = "spatConflict"
    CAM_PERCEPTION_DEVIATION = "camPerceptionDeviation"
    VRU_COLLISION = "vruCollision"
    CAN_TIMING = "canTiming"
    # stand-in for the external on-board image anomaly detector
    ONBOARD_CAMERA = "onboardCamera"


class Anomaly(str, Enum):
    BAD_SIGNATURE = "badSignature"
    IMPLAUSIBLE_PAYLOAD = "implausiblePayload"
    INCONSISTENT_STREAM = "inconsistentStream"
    POSITION_USURPATION = "positionUsurpation"
    GHOST = "ghost"
    HIJACKED_VEHICLE = "hijackedVehicle"
    CONFLICTING_GREENS = "conflictingGreens"
    STOP_LIE = "stopLie"
    IMMINENT_COLLISION = "imminentCollision"
    CAN_DOS = "canDos"
    CAN_INJECTION = "canInjection"
    ADVERSARIAL_INPUT = "adversarialInput"


class Source(str, Enum):
    CAM = "cam"
    CPM = "cpm"
    ONBOARD = "onboard"
    UWB = "uwb"
    SPAT = "spat"
    DENM = "denm"
    CAN = "can"


@dataclass(frozen=True)
class DetectionReport:
    """One detected anomaly.

    ``offender`` is a StationId, or a CAN identifier for CAN reports; 0 when
    unknown.  ``evidence`` holds SHA-256 digests of the implicated messages.
    """

    detector: Detector
    anomaly: Anomaly
    offender: int
    evidence: Tuple[bytes, ...]
    sim_time_ms: int
    source: Optional[Source] = None
    subject: Any = None
    details: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if not self.evidence and self.detector not in (Detector.VRU_COLLISION, Detector.CAN_TIMING,
                                                       Detector.ONBOARD_CAMERA):
            raise ValueError(f"{self.detector.value} report needs at least one evidence digest")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "detector": self.detector.value,
            "anomaly": self.anomaly.value,
            "offender": self.offender,
            "evidence": [e.hex() for e in self.evidence],
            "simTimeMs": self.sim_time_ms,
            "source": self.source.value if self.source else None,
            "subject": _jsonable(self.subject),
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, bytes):
        return v.hex()
    if isinstance(v, float):
        return round(v, 6)
    return v


class Track:
    """Time-ordered ring buffer of (time_ms, KinematicState) for one subject."""

    def __init__(self, subject, source: Source, capacity: int = TRACK_CAPACITY):
        self.subject = subject
        self.source = source
        self.history: Deque[Tuple[int, KinematicState]] = deque(maxlen=capacity)
        self.digests: Deque[bytes] = deque(maxlen=capacity)

    def __len__(self):
        return len(self.history)

    def append(self, time_ms: int, state: KinematicState, digest: bytes = b"") -> None:
        if self.history and time_ms < self.history[-1][0]:
            raise ValueError("track history must stay time-ordered")
        if self.history and time_ms == self.history[-1][0]:
            self.history[-1] = (time_ms, state)
            self.digests[-1] = digest
            return
        self.history.append((time_ms, state))
        self.digests.append(digest)

    @property
    def last(self) -> Tuple[int, KinematicState]:
        return self.history[-1]

    def at(self, time_ms: int) -> Optional[KinematicState]:
        for t, s in reversed(self.history):
            if t == time_ms:
                return s
            if t < time_ms:
                return None
        return None

    def mean_velocity(self, n: int = 5) -> Tuple[float, float]:
        """Average of the last ``n`` reported velocity vectors."""
        recent = list(self.history)[-n:]
        vx = sum(s.vx for _, s in recent) / len(recent)
        vy = sum(s.vy for _, s in recent) / len(recent)
        return vx, vy
