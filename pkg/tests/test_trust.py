import pytest
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

from v2x_sentinel.errors import KeysPurged, MalformedMessage
from v2x_sentinel.messages import CamPayload, KinematicState, SpatPayload, encode
from v2x_sentinel.trust import Certificate, Permission, Pki, SignedMessage, Verdict, purge_keys, sign, verify


@pytest.fixture(scope="module")
def pki():
    return Pki(b"test")


@pytest.fixture
def car(pki):
    return pki.enroll(100, [Permission.SEND_CAM, Permission.SEND_DENM], "car")


def cam(sender=100, t=0):
    return encode(CamPayload(sender, KinematicState(1, 2, 0.5, 3, 0), t))


def test_sign_verify_accepts(pki, car):
    msg = sign(car, cam())
    assert verify(msg, pki.root_public_key) is Verdict.ACCEPT


def test_signature_checks_out_with_raw_ed25519(car):
    msg = sign(car, cam())
    key = Ed25519PublicKey.from_public_bytes(msg.certificate.subject_public_key)
    key.verify(msg.signature, msg.payload_bytes)
    with pytest.raises(InvalidSignature):
        key.verify(msg.signature, msg.payload_bytes[:-1] + b"\x01")


def test_tampered_payload_and_signature(pki, car):
    msg = sign(car, cam())
    bad_payload = SignedMessage(msg.payload_bytes[:-1] + bytes([msg.payload_bytes[-1] ^ 1]), msg.certificate,
                                msg.signature)
    assert verify(bad_payload, pki.root_public_key) is Verdict.BAD_SIGNATURE
    bad_sig = SignedMessage(msg.payload_bytes, msg.certificate, bytes([msg.signature[0] ^ 1]) + msg.signature[1:])
    assert verify(bad_sig, pki.root_public_key) is Verdict.BAD_SIGNATURE


def test_foreign_root_rejects_chain(car):
    other = Pki(b"other")
    assert verify(sign(car, cam()), other.root_public_key) is Verdict.BAD_CHAIN


def test_permission_misuse(pki, car):
    spat = encode(SpatPayload(100, (), 0))
    assert verify(sign(car, spat), pki.root_public_key) is Verdict.PERMISSION_DENIED
    assert verify(sign(car, b""), pki.root_public_key) is Verdict.PERMISSION_DENIED
    assert verify(sign(car, b"\x7f"), pki.root_public_key) is Verdict.PERMISSION_DENIED


def test_envelope_round_trip(pki, car):
    msg = sign(car, cam(t=99))
    back = SignedMessage.from_bytes(msg.to_bytes())
    assert back == msg
    assert back.sender == 100
    assert verify(back, pki.root_public_key) is Verdict.ACCEPT
    assert Certificate.from_bytes(msg.certificate.to_bytes()) == msg.certificate


def test_envelope_truncations_rejected(car):
    data = sign(car, cam()).to_bytes()
    for n in range(len(data)):
        with pytest.raises(MalformedMessage):
            SignedMessage.from_bytes(data[:n])


def test_purge_is_idempotent_and_final(pki, car):
    before = sign(car, cam())
    purge_keys(car)
    purge_keys(car)
    assert car.purged
    assert car.certificate is None
    with pytest.raises(KeysPurged):
        sign(car, cam())
    # messages signed before the purge stay valid
    assert verify(before, pki.root_public_key) is Verdict.ACCEPT


def test_enrollment_is_deterministic():
    a = Pki(b"seed").enroll(5, [Permission.SEND_CAM], "x")
    b = Pki(b"seed").enroll(5, [Permission.SEND_CAM], "x")
    assert a.certificate == b.certificate
    assert sign(a, cam(5)).signature == sign(b, cam(5)).signature


def test_digest_changes_with_any_byte(car):
    a = sign(car, cam(t=1))
    b = sign(car, cam(t=2))
    assert a.digest() != b.digest()
    assert len(a.digest()) == 32
