"""Simplified pseudonym PKI: keys, a root -> intermediate -> station chain,
signed envelopes and the HSM key-purge primitive.

Signing is deliberately content-blind: the HSM signs whatever bytes it is
handed, so a compromised host gets valid signatures on falsified values.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import lru_cache
from typing import FrozenSet, Iterable, Optional

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

from .errors import InvariantViolation, KeysPurged, MalformedMessage
from .messages import MessageType

CERT_TAG = 0x10
SIGNED_TAG = 0x11


class Permission(IntEnum):
    SEND_CAM = 0
    SEND_CPM = 1
    SEND_DENM = 2
    SEND_SPAT = 3
    SEND_MAP = 4


PERMISSION_FOR_TYPE = {
    MessageType.CAM: Permission.SEND_CAM,
    MessageType.CPM: Permission.SEND_CPM,
    MessageType.DENM: Permission.SEND_DENM,
    MessageType.SPAT: Permission.SEND_SPAT,
    MessageType.MAP: Permission.SEND_MAP,
}

ALL_PERMISSIONS = frozenset(Permission)


class Issuer(IntEnum):
    ROOT_CA = 0
    INTERMEDIATE_CA = 1


class Verdict(Enum):
    ACCEPT = "accept"
    BAD_SIGNATURE = "badSignature"
    BAD_CHAIN = "badChain"
    PERMISSION_DENIED = "permissionDenied"


@dataclass(frozen=True)
class KeyPair:
    private_key: bytes
    public_key: bytes

    @classmethod
    def from_seed(cls, seed: bytes) -> "KeyPair":
        """Deterministic key pair; the private key is SHA-256 of ``seed``."""
        priv = hashlib.sha256(seed).digest()
        pub = Ed25519PrivateKey.from_private_bytes(priv).public_key().public_bytes(
            Encoding.Raw, PublicFormat.Raw)
        return cls(priv, pub)


def _perm_mask(perms: Iterable[Permission]) -> int:
    mask = 0
    for p in perms:
        mask |= 1 << int(p)
    return mask


@dataclass(frozen=True)
class Certificate:
    subject: int
    subject_public_key: bytes
    permissions: FrozenSet[Permission]
    issuer_signature: bytes
    issuer: Issuer
    # the intermediate CA certificate when issuer is INTERMEDIATE_CA
    issuer_certificate: Optional["Certificate"] = None

    def tbs_bytes(self) -> bytes:
        return tbs_bytes(self.subject, self.subject_public_key, self.permissions, self.issuer)

    def to_bytes(self) -> bytes:
        chain = b"\x00" if self.issuer_certificate is None else b"\x01" + self.issuer_certificate.to_bytes()
        return bytes([CERT_TAG]) + self.tbs_bytes() + self.issuer_signature + chain

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        cert, end = _parse_cert(bytes(data), 0)
        if end != len(data):
            raise MalformedMessage("trailing bytes after certificate")
        return cert


def tbs_bytes(subject: int, public_key: bytes, permissions, issuer: Issuer) -> bytes:
    return struct.pack("<I32sBB", subject, public_key, _perm_mask(permissions), int(issuer))


_TBS = struct.Struct("<I32sBB")


def _parse_cert(data: bytes, pos: int):
    if pos >= len(data) or data[pos] != CERT_TAG:
        raise MalformedMessage("expected certificate tag 0x10")
    pos += 1
    if pos + _TBS.size + 64 + 1 > len(data):
        raise MalformedMessage("truncated certificate")
    subject, pub, mask, issuer = _TBS.unpack_from(data, pos)
    pos += _TBS.size
    sig = data[pos:pos + 64]
    pos += 64
    has_chain = data[pos]
    pos += 1
    try:
        issuer = Issuer(issuer)
    except ValueError:
        raise InvariantViolation(f"unknown issuer {issuer}") from None
    perms = frozenset(p for p in Permission if mask & (1 << int(p)))
    parent = None
    if has_chain == 1:
        parent, pos = _parse_cert(data, pos)
    elif has_chain != 0:
        raise MalformedMessage("bad chain flag")
    return Certificate(subject, pub, perms, sig, issuer, parent), pos


@dataclass(frozen=True)
class SignedMessage:
    payload_bytes: bytes
    certificate: Certificate
    signature: bytes

    @property
    def sender(self) -> int:
        return self.certificate.subject

    def to_bytes(self) -> bytes:
        cert = self.certificate.to_bytes()
        return (bytes([SIGNED_TAG]) + struct.pack("<I", len(self.payload_bytes)) + self.payload_bytes
                + struct.pack("<H", len(cert)) + cert + self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> "SignedMessage":
        data = bytes(data)
        if len(data) < 5 or data[0] != SIGNED_TAG:
            raise MalformedMessage("expected signed-message tag 0x11")
        (n,) = struct.unpack_from("<I", data, 1)
        pos = 5
        payload = data[pos:pos + n]
        pos += n
        if len(payload) != n or pos + 2 > len(data):
            raise MalformedMessage("truncated signed message")
        (clen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        cert = Certificate.from_bytes(data[pos:pos + clen])
        pos += clen
        sig = data[pos:]
        if len(sig) != 64:
            raise MalformedMessage("signature must be 64 bytes")
        return cls(payload, cert, sig)

    def digest(self) -> bytes:
        """SHA-256 over the envelope bytes; used as DENM/report evidence."""
        return hashlib.sha256(self.to_bytes()).digest()


@lru_cache(maxsize=1024)
def _private_key(raw: bytes) -> Ed25519PrivateKey:
    return Ed25519PrivateKey.from_private_bytes(raw)


def _sign_raw(private_key: bytes, data: bytes) -> bytes:
    return _private_key(private_key).sign(data)


@lru_cache(maxsize=1 << 16)
def _verify_raw(public_key: bytes, signature: bytes, data: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, data)
    except (InvalidSignature, ValueError):
        return False
    return True


class CertificateAuthority:
    """Root or intermediate CA able to issue certificates."""

    def __init__(self, keys: KeyPair, certificate: Optional[Certificate] = None):
        self._keys = keys
        self.certificate = certificate

    @property
    def public_key(self) -> bytes:
        return self._keys.public_key

    @property
    def issuer_kind(self) -> Issuer:
        return Issuer.ROOT_CA if self.certificate is None else Issuer.INTERMEDIATE_CA

    @classmethod
    def root(cls, seed: bytes) -> "CertificateAuthority":
        return cls(KeyPair.from_seed(b"root-ca|" + seed))

    def issue(self, subject: int, public_key: bytes, permissions: Iterable[Permission]) -> Certificate:
        perms = frozenset(permissions)
        issuer = self.issuer_kind
        sig = _sign_raw(self._keys.private_key, tbs_bytes(subject, public_key, perms, issuer))
        return Certificate(subject, public_key, perms, sig, issuer, self.certificate)

    def intermediate(self, subject: int, seed: bytes) -> "CertificateAuthority":
        if self.certificate is not None:
            raise ValueError("only the root issues intermediate CAs")
        keys = KeyPair.from_seed(b"intermediate-ca|" + seed)
        cert = self.issue(subject, keys.public_key, ALL_PERMISSIONS)
        return CertificateAuthority(keys, cert)


class Hsm:
    """Tamper-resistant key store.  The private key never leaves this object."""

    def __init__(self, keys: KeyPair, certificate: Certificate):
        if keys.public_key != certificate.subject_public_key:
            raise InvariantViolation("certificate does not match key pair")
        self.__private = keys.private_key
        self._certificate: Optional[Certificate] = certificate
        self._station = certificate.subject

    @property
    def purged(self) -> bool:
        return self._certificate is None

    @property
    def station(self) -> int:
        return self._station

    @property
    def certificate(self) -> Optional[Certificate]:
        return self._certificate

    def sign(self, payload_bytes: bytes) -> SignedMessage:
        return sign(self, payload_bytes)

    def purge(self) -> None:
        purge_keys(self)

    def __repr__(self):
        return f"Hsm(station={self._station}, purged={self.purged})"


def sign(hsm: Hsm, payload_bytes: bytes) -> SignedMessage:
    """Sign arbitrary payload bytes; does not look at their meaning."""
    if hsm.purged:
        raise KeysPurged(f"station {hsm.station} has purged its keys")
    sig = _sign_raw(hsm._Hsm__private, bytes(payload_bytes))
    return SignedMessage(bytes(payload_bytes), hsm.certificate, sig)


def purge_keys(hsm: Hsm) -> None:
    """Irreversibly forget the private key and certificate (idempotent)."""
    hsm._Hsm__private = None
    hsm._certificate = None


def _chain_ok(cert: Certificate, root_public_key: bytes, depth: int = 0) -> bool:
    if depth > 2:
        return False
    if cert.issuer == Issuer.ROOT_CA:
        return cert.issuer_certificate is None and _verify_raw(
            root_public_key, cert.issuer_signature, cert.tbs_bytes())
    parent = cert.issuer_certificate
    if parent is None or parent.issuer != Issuer.ROOT_CA:
        return False
    if not _verify_raw(parent.subject_public_key, cert.issuer_signature, cert.tbs_bytes()):
        return False
    # a station certificate may not claim permissions its issuer lacks
    if not cert.permissions <= parent.permissions:
        return False
    return _chain_ok(parent, root_public_key, depth + 1)


def verify(msg: SignedMessage, root_public_key: bytes) -> Verdict:
    """Check chain, signature and type permission, in that order."""
    if not _chain_ok(msg.certificate, root_public_key):
        return Verdict.BAD_CHAIN
    if not _verify_raw(msg.certificate.subject_public_key, msg.signature, msg.payload_bytes):
        return Verdict.BAD_SIGNATURE
    if not msg.payload_bytes:
        return Verdict.PERMISSION_DENIED
    try:
        needed = PERMISSION_FOR_TYPE[MessageType(msg.payload_bytes[0])]
    except (ValueError, KeyError):
        return Verdict.PERMISSION_DENIED
    if needed not in msg.certificate.permissions:
        return Verdict.PERMISSION_DENIED
    return Verdict.ACCEPT


class Pki:
    """Root plus one intermediate CA; issues station HSMs deterministically."""

    INTERMEDIATE_ID = 0xFFFF0001

    def __init__(self, seed: bytes = b"v2x"):
        self.seed = seed
        self.root = CertificateAuthority.root(seed)
        self.intermediate = self.root.intermediate(self.INTERMEDIATE_ID, seed)

    @property
    def root_public_key(self) -> bytes:
        return self.root.public_key

    def enroll(self, station: int, permissions: Iterable[Permission], name: str = "") -> Hsm:
        keys = KeyPair.from_seed(b"station|" + self.seed + b"|" + name.encode() + b"|" + str(station).encode())
        cert = self.intermediate.issue(station, keys.public_key, permissions)
        return Hsm(keys, cert)
