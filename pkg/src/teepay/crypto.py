"""Cryptographic primitives and a software emulation of TEE attestation quotes.

Schemes are deliberately pluggable behind narrow contracts: Ed25519 for
signatures, an ECIES construction (ephemeral X25519 + ChaCha20-Poly1305) for
asymmetric encryption, and SHA-256 for digests.  All randomness flows through
an optional integer seed so tests are reproducible; without a seed the OS
secure source is used.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

DIGEST_LEN = 32
SIGNATURE_LEN = 64
PUBKEY_LEN = 32

_ECIES_NONCE = b"\x00" * 12  # safe: every message uses a fresh ephemeral key


class DecryptionError(Exception):
    """Ciphertext could not be decrypted (wrong key or corruption)."""


def derive_seed_bytes(seed: int, label: str) -> bytes:
    """Expand an integer seed plus a domain label into 32 key bytes."""
    return hashlib.sha256(
        b"teepay-seed|" + label.encode() + b"|" + struct.pack("<q", seed)
    ).digest()


def _key_material(seed: int | None, label: str) -> bytes:
    if seed is None:
        return os.urandom(32)
    return derive_seed_bytes(seed, label)


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


# ---------------------------------------------------------------------------
# Byte-level framing: every variable-length field is length-prefixed with a
# little-endian u32 so serializations are canonical and golden vectors stable.
# ---------------------------------------------------------------------------

def pack_bytes(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def unpack_bytes(buf: bytes, offset: int) -> tuple[bytes, int]:
    (n,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if offset + n > len(buf):
        raise ValueError("truncated field")
    return buf[offset : offset + n], offset + n


# ---------------------------------------------------------------------------
# Signatures (Ed25519)
# ---------------------------------------------------------------------------

@dataclass
class SigningKeyPair:
    secret: Ed25519PrivateKey
    public: bytes  # 32 raw bytes, doubles as an address / key identifier


def generate_signing_keypair(seed: int | None = None, label: str = "sign") -> SigningKeyPair:
    sk = Ed25519PrivateKey.from_private_bytes(_key_material(seed, label))
    pub = sk.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return SigningKeyPair(secret=sk, public=pub)


def sign(secret: Ed25519PrivateKey, message: bytes) -> bytes:
    return secret.sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    """True iff signature is valid; malformed inputs verify as False."""
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        return True
    except (InvalidSignature, ValueError, TypeError):
        return False


# ---------------------------------------------------------------------------
# Asymmetric encryption (ECIES: ephemeral X25519 + ChaCha20-Poly1305)
# ---------------------------------------------------------------------------

@dataclass
class EncryptionKeyPair:
    secret: X25519PrivateKey
    public: bytes  # 32 raw bytes


def generate_encryption_keypair(seed: int | None = None, label: str = "enc") -> EncryptionKeyPair:
    sk = X25519PrivateKey.from_private_bytes(_key_material(seed, label))
    pub = sk.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return EncryptionKeyPair(secret=sk, public=pub)


def _session_key(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
    return hashlib.sha256(b"teepay-ecies|" + shared + eph_pub + recipient_pub).digest()


def encrypt(public: bytes, plaintext: bytes) -> bytes:
    """Encrypt to the holder of `public`; output = eph_pub || aead ciphertext."""
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    shared = eph.exchange(X25519PublicKey.from_public_bytes(public))
    key = _session_key(shared, eph_pub, public)
    ct = ChaCha20Poly1305(key).encrypt(_ECIES_NONCE, plaintext, None)
    return pack_bytes(eph_pub) + pack_bytes(ct)


def decrypt(secret: X25519PrivateKey, ciphertext: bytes) -> bytes:
    """Inverse of encrypt; raises DecryptionError on wrong key or corruption."""
    try:
        eph_pub, off = unpack_bytes(ciphertext, 0)
        ct, off = unpack_bytes(ciphertext, off)
        if off != len(ciphertext) or len(eph_pub) != PUBKEY_LEN:
            raise ValueError("bad framing")
        my_pub = secret.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        shared = secret.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        key = _session_key(shared, eph_pub, my_pub)
        return ChaCha20Poly1305(key).decrypt(_ECIES_NONCE, ct, None)
    except (InvalidTag, ValueError, struct.error) as exc:
        raise DecryptionError(str(exc)) from exc


class SessionBox:
    """Authenticated encryption bound to two parties' asymmetric key pairs.

    The session key is a static-static X25519 agreement between one party's
    decryption secret and the other's public key, so a message sealed here can
    be opened only by the holder of the peer secret.  Nonces encode direction
    and a per-sender sequence, so the two directions never collide.
    """

    def __init__(self, my_secret: X25519PrivateKey, peer_public: bytes):
        my_public = my_secret.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        shared = my_secret.exchange(X25519PublicKey.from_public_bytes(peer_public))
        lo, hi = sorted((my_public, peer_public))
        self._aead = ChaCha20Poly1305(
            hashlib.sha256(b"teepay-session|" + shared + lo + hi).digest())
        self._direction = 1 if my_public > peer_public else 0
        self._seq = 0

    def seal(self, plaintext: bytes) -> bytes:
        nonce = bytes([self._direction]) + struct.pack("<Q", self._seq) + b"\x00\x00\x00"
        self._seq += 1
        return nonce + self._aead.encrypt(nonce, plaintext, None)

    def open(self, ciphertext: bytes) -> bytes:
        if len(ciphertext) < 12 + 16:
            raise DecryptionError("ciphertext too short")
        nonce = ciphertext[:12]
        if nonce[0] == self._direction:
            raise DecryptionError("reflected own-direction message")
        try:
            return self._aead.decrypt(nonce, ciphertext[12:], None)
        except InvalidTag as exc:
            raise DecryptionError("authentication failed") from exc


# ---------------------------------------------------------------------------
# Emulated attestation quotes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Quote:
    """Signed statement binding an enclave identity digest to chosen data."""

    measurement: bytes  # 32-byte digest of the enclave build identity
    report_data: bytes
    authority_signature: bytes

    def to_bytes(self) -> bytes:
        return (
            pack_bytes(self.measurement)
            + pack_bytes(self.report_data)
            + pack_bytes(self.authority_signature)
        )

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Quote":
        measurement, off = unpack_bytes(buf, 0)
        report_data, off = unpack_bytes(buf, off)
        sig, off = unpack_bytes(buf, off)
        if off != len(buf):
            raise ValueError("trailing bytes in quote")
        return cls(measurement, report_data, sig)


def _quote_signing_payload(measurement: bytes, report_data: bytes) -> bytes:
    return b"teepay-quote|" + pack_bytes(measurement) + pack_bytes(report_data)


def quote_create(authority_secret: Ed25519PrivateKey, measurement: bytes, report_data: bytes) -> Quote:
    if len(measurement) != DIGEST_LEN:
        raise ValueError("measurement must be 32 bytes")
    sig = sign(authority_secret, _quote_signing_payload(measurement, report_data))
    return Quote(measurement, report_data, sig)


def quote_verify(authority_public: bytes, quote: Quote, expected_measurement: bytes) -> bool:
    if quote.measurement != expected_measurement:
        return False
    payload = _quote_signing_payload(quote.measurement, quote.report_data)
    return verify(authority_public, payload, quote.authority_signature)
