"""V2X payload types and their canonical fixed-width binary codec.

Every payload encodes to one type-tag byte followed by its fields in
declaration order, little-endian, with reals as IEEE-754 binary64 and lists
prefixed by an unsigned 16-bit count.  The layout is the wire contract used
for signatures and trace files, so changing it is a breaking change.

    >>> cam = CamPayload(sender=1, state=KinematicState(0, 0, 0, 0, 0), gen_time=0)
    >>> raw = encode(cam)
    >>> raw[0], len(raw)
    (1, 53)
    >>> decode(raw) == cam
    True
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Tuple, Union

from .errors import InvariantViolation, MalformedMessage

TAU = 2.0 * math.pi
REGION_HALF_SIZE = 500.0
MAX_SPEED = 100.0
MAX_ACCEL = 20.0
MAX_CPM_OBJECTS = 128
U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1


class MessageType(IntEnum):
    CAM = 0x01
    CPM = 0x02
    DENM = 0x03
    SPAT = 0x04
    MAP = 0x05


class Classification(IntEnum):
    VEHICLE = 0
    PEDESTRIAN = 1
    CYCLIST = 2
    UNKNOWN = 3


class DenmCause(IntEnum):
    MALICIOUS_CPM = 0
    HACKED_VEHICLE = 1
    HACKED_TRAFFIC_LIGHT = 2
    VRU_COLLISION = 3
    ONBOARD_COMPROMISE = 4
    CAN_INTRUSION = 5


class SignalState(IntEnum):
    RED = 0
    YELLOW = 1
    GREEN = 2
    RED_YELLOW_BLINKING = 3


class Approach(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


def normalize_heading(theta: float) -> float:
    """Wrap an angle into [0, 2π)."""
    h = math.fmod(theta, TAU)
    if h < 0.0:
        h += TAU
    # fmod of a tiny negative number can round up to exactly TAU
    if h >= TAU:
        h = 0.0
    return h


def _finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)


@dataclass(frozen=True)
class KinematicState:
    """Planar pose, speed and along-heading acceleration in the intersection frame."""

    x: float
    y: float
    heading: float
    speed: float
    accel: float

    def validate(self) -> None:
        if not _finite(self.x, self.y, self.heading, self.speed, self.accel):
            raise InvariantViolation(f"non-finite kinematic field in {self}")
        if not (-REGION_HALF_SIZE <= self.x <= REGION_HALF_SIZE
                and -REGION_HALF_SIZE <= self.y <= REGION_HALF_SIZE):
            raise InvariantViolation(f"position ({self.x}, {self.y}) outside simulation region")
        if not 0.0 <= self.heading < TAU:
            raise InvariantViolation(f"heading {self.heading} outside [0, 2pi)")
        if not 0.0 <= self.speed <= MAX_SPEED:
            raise InvariantViolation(f"speed {self.speed} outside [0, {MAX_SPEED}]")
        if abs(self.accel) > MAX_ACCEL:
            raise InvariantViolation(f"|accel| {self.accel} exceeds {MAX_ACCEL}")

    @property
    def vx(self) -> float:
        return self.speed * math.cos(self.heading)

    @property
    def vy(self) -> float:
        return self.speed * math.sin(self.heading)

    @classmethod
    def from_velocity(cls, x: float, y: float, vx: float, vy: float, accel: float = 0.0,
                      fallback_heading: float = 0.0) -> "KinematicState":
        speed = math.hypot(vx, vy)
        heading = normalize_heading(math.atan2(vy, vx)) if speed > 0.0 else fallback_heading
        return cls(x, y, heading, speed, accel)


@dataclass(frozen=True)
class FieldOfView:
    """Sector-shaped sensor coverage: origin, boresight, range and half-angle."""

    x: float
    y: float
    orientation: float
    range: float
    half_angle: float

    def validate(self) -> None:
        if not _finite(self.x, self.y, self.orientation, self.range, self.half_angle):
            raise InvariantViolation("non-finite field of view")
        if self.range <= 0.0:
            raise InvariantViolation("field of view range must be positive")
        if not 0.0 < self.half_angle <= math.pi:
            raise InvariantViolation("field of view half-angle must lie in (0, pi]")

    def contains(self, x: float, y: float, margin: float = 0.0) -> bool:
        """True if (x, y) lies inside the sector shrunk by ``margin`` metres."""
        dx, dy = x - self.x, y - self.y
        dist = math.hypot(dx, dy)
        if dist > self.range - margin:
            return False
        if self.half_angle >= math.pi:
            return True
        if dist == 0.0:
            return margin <= 0.0
        off = abs((math.atan2(dy, dx) - self.orientation + math.pi) % TAU - math.pi)
        if off > self.half_angle:
            return False
        if margin > 0.0:
            # lateral distance to the nearest sector edge
            return dist * math.sin(self.half_angle - off) >= margin
        return True


@dataclass(frozen=True)
class CamPayload:
    sender: int
    state: KinematicState
    gen_time: int

    def validate(self) -> None:
        _check_sender(self.sender)
        _check_u64(self.gen_time, "genTime")
        self.state.validate()


@dataclass(frozen=True)
class PerceivedObject:
    object_id: int
    state: KinematicState
    confidence: float
    classification: Classification

    def validate(self) -> None:
        if not 0 <= self.object_id <= 0xFFFF:
            raise InvariantViolation(f"objectId {self.object_id} not u16")
        if not (math.isfinite(self.confidence) and 0.0 <= self.confidence <= 1.0):
            raise InvariantViolation(f"confidence {self.confidence} outside [0, 1]")
        if not isinstance(self.classification, Classification):
            raise InvariantViolation(f"bad classification {self.classification!r}")
        self.state.validate()


@dataclass(frozen=True)
class CpmPayload:
    sender: int
    sensor_fov: FieldOfView
    objects: Tuple[PerceivedObject, ...]
    gen_time: int

    def validate(self) -> None:
        _check_sender(self.sender)
        _check_u64(self.gen_time, "genTime")
        self.sensor_fov.validate()
        if len(self.objects) > MAX_CPM_OBJECTS:
            raise InvariantViolation(f"{len(self.objects)} objects exceed {MAX_CPM_OBJECTS}")
        for obj in self.objects:
            obj.validate()
            if not self.sensor_fov.contains(obj.state.x, obj.state.y):
                raise InvariantViolation(f"object {obj.object_id} outside declared field of view")


@dataclass(frozen=True)
class DenmPayload:
    sender: int
    cause: DenmCause
    event_state: KinematicState
    offender: int
    evidence_digest: bytes
    gen_time: int

    def validate(self) -> None:
        _check_sender(self.sender)
        _check_u64(self.gen_time, "genTime")
        if not isinstance(self.cause, DenmCause):
            raise InvariantViolation(f"bad DENM cause {self.cause!r}")
        if not 0 <= self.offender <= U32_MAX:
            raise InvariantViolation(f"offender {self.offender} not u32")
        if len(self.evidence_digest) != 32:
            raise InvariantViolation("evidence digest must be 32 bytes")
        self.event_state.validate()


@dataclass(frozen=True)
class SpatPhase:
    signal_group: int
    state: SignalState
    time_to_change: int


@dataclass(frozen=True)
class SpatPayload:
    sender: int
    phases: Tuple[SpatPhase, ...]
    gen_time: int

    def validate(self) -> None:
        _check_sender(self.sender)
        _check_u64(self.gen_time, "genTime")
        seen = set()
        for ph in self.phases:
            if not 0 <= ph.signal_group <= 0xFF:
                raise InvariantViolation(f"signal group {ph.signal_group} not u8")
            if not isinstance(ph.state, SignalState):
                raise InvariantViolation(f"bad signal state {ph.state!r}")
            if not 0 <= ph.time_to_change <= U32_MAX:
                raise InvariantViolation(f"timeToChange {ph.time_to_change} not u32")
            if ph.signal_group in seen:
                raise InvariantViolation(f"signal group {ph.signal_group} repeated")
            seen.add(ph.signal_group)

    def state_of(self, group: int):
        for ph in self.phases:
            if ph.signal_group == group:
                return ph
        return None


@dataclass(frozen=True)
class Lane:
    lane_id: int
    ingress: Approach
    egress: Approach
    signal_group: int


@dataclass(frozen=True)
class MapPayload:
    sender: int
    lanes: Tuple[Lane, ...]

    def validate(self) -> None:
        _check_sender(self.sender)
        ids = set()
        for lane in self.lanes:
            if not 0 <= lane.lane_id <= 0xFFFF:
                raise InvariantViolation(f"laneId {lane.lane_id} not u16")
            if not (isinstance(lane.ingress, Approach) and isinstance(lane.egress, Approach)):
                raise InvariantViolation(f"bad approach on lane {lane.lane_id}")
            if not 0 <= lane.signal_group <= 0xFF:
                raise InvariantViolation(f"signal group {lane.signal_group} not u8")
            if lane.lane_id in ids:
                raise InvariantViolation(f"lane id {lane.lane_id} repeated")
            ids.add(lane.lane_id)

    @property
    def signal_groups(self) -> List[int]:
        return sorted({lane.signal_group for lane in self.lanes})


Payload = Union[CamPayload, CpmPayload, DenmPayload, SpatPayload, MapPayload]

PAYLOAD_TAGS = {
    CamPayload: MessageType.CAM,
    CpmPayload: MessageType.CPM,
    DenmPayload: MessageType.DENM,
    SpatPayload: MessageType.SPAT,
    MapPayload: MessageType.MAP,
}


def _check_sender(sender: int) -> None:
    if not 1 <= sender <= U32_MAX:
        raise InvariantViolation(f"sender StationId {sender} must be a non-zero u32")


def _check_u64(value: int, name: str) -> None:
    if not 0 <= value <= U64_MAX:
        raise InvariantViolation(f"{name} {value} not u64")


# --- encoding -----------------------------------------------------------------

_STATE = struct.Struct("<5d")
_FOV = struct.Struct("<5d")
_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


def _pack_state(s: KinematicState) -> bytes:
    return _STATE.pack(s.x, s.y, s.heading, s.speed, s.accel)


def encode(payload: Payload) -> bytes:
    """Serialize a payload after checking its invariants."""
    tag = PAYLOAD_TAGS.get(type(payload))
    if tag is None:
        raise TypeError(f"cannot encode {type(payload).__name__}")
    payload.validate()
    out = [_U8.pack(tag)]
    if isinstance(payload, CamPayload):
        out += [_U32.pack(payload.sender), _pack_state(payload.state), _U64.pack(payload.gen_time)]
    elif isinstance(payload, CpmPayload):
        f = payload.sensor_fov
        out += [_U32.pack(payload.sender),
                _FOV.pack(f.x, f.y, f.orientation, f.range, f.half_angle),
                _U16.pack(len(payload.objects))]
        for obj in payload.objects:
            out += [_U16.pack(obj.object_id), _pack_state(obj.state),
                    _F64.pack(obj.confidence), _U8.pack(obj.classification)]
        out.append(_U64.pack(payload.gen_time))
    elif isinstance(payload, DenmPayload):
        out += [_U32.pack(payload.sender), _U8.pack(payload.cause), _pack_state(payload.event_state),
                _U32.pack(payload.offender), bytes(payload.evidence_digest), _U64.pack(payload.gen_time)]
    elif isinstance(payload, SpatPayload):
        out += [_U32.pack(payload.sender), _U16.pack(len(payload.phases))]
        for ph in payload.phases:
            out += [_U8.pack(ph.signal_group), _U8.pack(ph.state), _U32.pack(ph.time_to_change)]
        out.append(_U64.pack(payload.gen_time))
    else:
        out += [_U32.pack(payload.sender), _U16.pack(len(payload.lanes))]
        for lane in payload.lanes:
            out += [_U16.pack(lane.lane_id), _U8.pack(lane.ingress), _U8.pack(lane.egress),
                    _U8.pack(lane.signal_group)]
    return b"".join(out)


# --- decoding -----------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0

    def take(self, st: struct.Struct):
        end = self.pos + st.size
        if end > len(self.data):
            raise MalformedMessage(f"truncated at byte {self.pos}: need {st.size}, have {len(self.data) - self.pos}")
        vals = st.unpack_from(self.data, self.pos)
        self.pos = end
        return vals if len(vals) > 1 else vals[0]

    def raw(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise MalformedMessage(f"truncated at byte {self.pos}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise MalformedMessage(f"{len(self.data) - self.pos} trailing bytes")


def _enum(cls, value):
    try:
        return cls(value)
    except ValueError:
        raise InvariantViolation(f"{value} is not a valid {cls.__name__}") from None


def _state(r: _Reader) -> KinematicState:
    return KinematicState(*r.take(_STATE))


def decode(data: bytes) -> Payload:
    """Parse bytes produced by :func:`encode`.

    Raises:
        MalformedMessage: empty/truncated input, unknown tag, or trailing bytes.
        InvariantViolation: well-formed bytes whose fields break a type invariant.
    """
    r = _Reader(data)
    tag = r.take(_U8)
    if tag == MessageType.CAM:
        payload = CamPayload(r.take(_U32), _state(r), r.take(_U64))
    elif tag == MessageType.CPM:
        sender = r.take(_U32)
        fov = FieldOfView(*r.take(_FOV))
        objects = []
        for _ in range(r.take(_U16)):
            oid = r.take(_U16)
            st = _state(r)
            conf = r.take(_F64)
            cls = _enum(Classification, r.take(_U8))
            objects.append(PerceivedObject(oid, st, conf, cls))
        payload = CpmPayload(sender, fov, tuple(objects), r.take(_U64))
    elif tag == MessageType.DENM:
        sender = r.take(_U32)
        cause = _enum(DenmCause, r.take(_U8))
        st = _state(r)
        offender = r.take(_U32)
        digest = r.raw(32)
        payload = DenmPayload(sender, cause, st, offender, digest, r.take(_U64))
    elif tag == MessageType.SPAT:
        sender = r.take(_U32)
        phases = []
        for _ in range(r.take(_U16)):
            group = r.take(_U8)
            st = _enum(SignalState, r.take(_U8))
            phases.append(SpatPhase(group, st, r.take(_U32)))
        payload = SpatPayload(sender, tuple(phases), r.take(_U64))
    elif tag == MessageType.MAP:
        sender = r.take(_U32)
        lanes = []
        for _ in range(r.take(_U16)):
            lane_id = r.take(_U16)
            ing = _enum(Approach, r.take(_U8))
            egr = _enum(Approach, r.take(_U8))
            lanes.append(Lane(lane_id, ing, egr, r.take(_U8)))
        payload = MapPayload(sender, tuple(lanes))
    else:
        raise MalformedMessage(f"unknown type tag 0x{tag:02x}")
    r.finish()
    payload.validate()
    return payload


def payload_type(data: bytes) -> MessageType:
    """Type tag of encoded payload bytes without decoding the body."""
    if not data:
        raise MalformedMessage("empty message")
    try:
        return MessageType(data[0])
    except ValueError:
        raise MalformedMessage(f"unknown type tag 0x{data[0]:02x}") from None
