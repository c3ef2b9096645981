"""Cryptographic building blocks used by the protocol actors.

Asymmetric encryption is a hybrid scheme (X25519 key agreement, HKDF-SHA256,
AES-256-GCM), signatures are Ed25519, and the per-check-in pseudonym is a
truncated keyed hash of a daily seed.  All key generation and encryption is
driven by an explicit seeded ``random.Random`` so whole simulations replay
byte-for-byte.  None of this aims at side-channel resistance; the simulator
cares about protocol-level behaviour, not implementation hardening.
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from random import Random

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)

MAX_PLAINTEXT = 4096
TRACE_ID_LEN = 16
CONTACT_KEY_LEN = 32
VERIFICATION_CODE_LEN = 8
CODE_ALPHABET = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"

# Roles tag every key with its place in the protocol.  Signing roles use
# Ed25519, everything else is an X25519 encryption key.
SIGNING_ROLES = frozenset({"health-dept-sign", "adversary-sign", "ca"})
ENCRYPTION_ROLES = frozenset({"venue", "health-dept-enc", "daily-master", "adversary"})
KEY_ROLES = SIGNING_ROLES | ENCRYPTION_ROLES

_HKDF_INFO = b"lucasim/hybrid-v1"
_EPH_PUB_LEN = 32
_NONCE_LEN = 12


class DecryptionFailure(Exception):
    """Authenticated decryption rejected the ciphertext (wrong key or tamper)."""


@dataclass(frozen=True)
class PublicKey:
    role: str
    data: bytes


@dataclass(frozen=True)
class PrivateKey:
    role: str
    data: bytes


@dataclass(frozen=True)
class AsymKeyPair:
    public: PublicKey
    private: PrivateKey

    @property
    def role(self) -> str:
        return self.public.role


@dataclass(frozen=True)
class Signature:
    data: bytes
    signer_hint: str


@dataclass(frozen=True)
class TracingSeed:
    """Per-guest, per-day secret from which check-in pseudonyms derive."""

    day: int
    secret: bytes


@dataclass(frozen=True)
class EncryptedUserReference:
    """The encrypted (user_id, contact key) blob carried in check-in records.

    ``layers == 1`` means only the daily master layer is present;
    ``layers == 2`` adds the venue layer on the outside.
    """

    layers: int
    ciphertext: bytes


def gen_keypair(role: str, rng: Random) -> AsymKeyPair:
    """Generate a role-tagged keypair deterministically from ``rng``."""
    if role not in KEY_ROLES:
        raise ValueError(f"unknown key role: {role}")
    raw = rng.randbytes(32)
    if role in SIGNING_ROLES:
        sk = Ed25519PrivateKey.from_private_bytes(raw)
        pub = sk.public_key().public_bytes_raw()
    else:
        sk = X25519PrivateKey.from_private_bytes(raw)
        pub = sk.public_key().public_bytes_raw()
    return AsymKeyPair(PublicKey(role, pub), PrivateKey(role, raw))


def key_fingerprint(pk: PublicKey) -> str:
    return hashlib.sha256(pk.data).hexdigest()[:16]


def _derive_session(shared: bytes, eph_pub: bytes) -> tuple[bytes, bytes]:
    # HKDF-SHA256 (extract + single expand block is enough for 44 bytes).
    prk = hmac.new(eph_pub, shared, hashlib.sha256).digest()
    t1 = hmac.new(prk, _HKDF_INFO + b"\x01", hashlib.sha256).digest()
    t2 = hmac.new(prk, t1 + _HKDF_INFO + b"\x02", hashlib.sha256).digest()
    okm = t1 + t2
    return okm[:32], okm[32 : 32 + _NONCE_LEN]


def encrypt(pk: PublicKey, message: bytes, rng: Random) -> bytes:
    """Hybrid public-key encryption with a fresh ephemeral key from ``rng``."""
    if pk.role not in ENCRYPTION_ROLES:
        raise ValueError(f"role {pk.role} is not an encryption role")
    if not message:
        raise ValueError("empty plaintext")
    if len(message) > MAX_PLAINTEXT:
        raise ValueError(f"plaintext exceeds {MAX_PLAINTEXT} bytes")
    eph = X25519PrivateKey.from_private_bytes(rng.randbytes(32))
    eph_pub = eph.public_key().public_bytes_raw()
    shared = eph.exchange(X25519PublicKey.from_public_bytes(pk.data))
    key, nonce = _derive_session(shared, eph_pub)
    ct = AESGCM(key).encrypt(nonce, message, eph_pub)
    return eph_pub + ct


def decrypt(sk: PrivateKey, ciphertext: bytes) -> bytes:
    """Invert :func:`encrypt`; raises :class:`DecryptionFailure` on any mismatch."""
    if sk.role not in ENCRYPTION_ROLES:
        raise ValueError(f"role {sk.role} is not an encryption role")
    if len(ciphertext) < _EPH_PUB_LEN + 16:
        raise DecryptionFailure("ciphertext too short")
    eph_pub = ciphertext[:_EPH_PUB_LEN]
    body = ciphertext[_EPH_PUB_LEN:]
    try:
        priv = X25519PrivateKey.from_private_bytes(sk.data)
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key, nonce = _derive_session(shared, eph_pub)
        return AESGCM(key).decrypt(nonce, body, eph_pub)
    except (InvalidTag, ValueError) as exc:
        raise DecryptionFailure("authentication failed") from exc


def sign(sk: PrivateKey, message: bytes) -> Signature:
    if sk.role not in SIGNING_ROLES:
        raise ValueError(f"role {sk.role} is not a signing role")
    priv = Ed25519PrivateKey.from_private_bytes(sk.data)
    hint = hashlib.sha256(priv.public_key().public_bytes_raw()).hexdigest()[:16]
    return Signature(priv.sign(message), hint)


def verify(pk: PublicKey, message: bytes, sig: Signature) -> bool:
    """True iff ``sig`` was produced over ``message`` by the pair of ``pk``."""
    if pk.role not in SIGNING_ROLES:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(pk.data).verify(sig.data, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def sym_encrypt(key: bytes, message: bytes, rng: Random) -> bytes:
    """Authenticated symmetric encryption for contact records."""
    if len(key) != CONTACT_KEY_LEN:
        raise ValueError("symmetric key must be 32 bytes")
    if not message or len(message) > MAX_PLAINTEXT:
        raise ValueError("plaintext must be 1..4096 bytes")
    nonce = rng.randbytes(_NONCE_LEN)
    return nonce + AESGCM(key).encrypt(nonce, message, b"")


def sym_decrypt(key: bytes, ciphertext: bytes) -> bytes:
    if len(ciphertext) < _NONCE_LEN + 16:
        raise DecryptionFailure("ciphertext too short")
    try:
        return AESGCM(key).decrypt(ciphertext[:_NONCE_LEN], ciphertext[_NONCE_LEN:], b"")
    except (InvalidTag, ValueError) as exc:
        raise DecryptionFailure("authentication failed") from exc


def new_tracing_seed(day: int, rng: Random) -> TracingSeed:
    return TracingSeed(day=day, secret=rng.randbytes(32))


def derive_trace_id(seed: TracingSeed, counter: int) -> bytes:
    """Pseudonym for one check-in: keyed hash of the per-day counter, truncated."""
    if counter < 0:
        raise ValueError("counter must be non-negative")
    mac = hmac.new(seed.secret, counter.to_bytes(8, "big"), hashlib.sha256)
    return mac.digest()[:TRACE_ID_LEN]


def derive_all_trace_ids(seed: TracingSeed, max_counter: int) -> list[bytes]:
    """Enumerate trace ids 0..max_counter, exactly as the server does when tracing."""
    if max_counter < 0:
        raise ValueError("max_counter must be non-negative")
    return [derive_trace_id(seed, i) for i in range(max_counter + 1)]


def gen_verification_code(rng: Random, length: int = VERIFICATION_CODE_LEN) -> str:
    return "".join(rng.choice(CODE_ALPHABET) for _ in range(length))


def pack_user_reference(user_id: str, contact_key: bytes) -> bytes:
    if len(contact_key) != CONTACT_KEY_LEN:
        raise ValueError("contact key must be 32 bytes")
    return contact_key + user_id.encode("ascii")


def unpack_user_reference(plain: bytes) -> tuple[str, bytes]:
    if len(plain) <= CONTACT_KEY_LEN:
        raise DecryptionFailure("reference plaintext too short")
    return plain[CONTACT_KEY_LEN:].decode("ascii"), plain[:CONTACT_KEY_LEN]


def seal_user_reference(
    master_pk: PublicKey, user_id: str, contact_key: bytes, rng: Random
) -> EncryptedUserReference:
    """Build the inner (daily-master) layer of a user reference."""
    ct = encrypt(master_pk, pack_user_reference(user_id, contact_key), rng)
    return EncryptedUserReference(layers=1, ciphertext=ct)


def wrap_reference(
    ref: EncryptedUserReference, venue_pk: PublicKey, rng: Random
) -> EncryptedUserReference:
    """Add the outer (venue) layer on top of a single-layer reference."""
    if ref.layers != 1:
        raise ValueError("can only wrap a single-layer reference")
    return EncryptedUserReference(layers=2, ciphertext=encrypt(venue_pk, ref.ciphertext, rng))


def unwrap_outer(ref: EncryptedUserReference, venue_sk: PrivateKey) -> EncryptedUserReference:
    """Remove the venue layer; fails unless the matching venue key is used first."""
    if ref.layers != 2:
        raise ValueError("reference has no outer layer")
    return EncryptedUserReference(layers=1, ciphertext=decrypt(venue_sk, ref.ciphertext))


def open_user_reference(
    ref: EncryptedUserReference, master_sk: PrivateKey
) -> tuple[str, bytes]:
    """Remove the daily-master layer and recover (user_id, contact key)."""
    if ref.layers != 1:
        raise ValueError("outer layer still present")
    return unpack_user_reference(decrypt(master_sk, ref.ciphertext))
