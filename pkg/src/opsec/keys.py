"""Key material, hop channels and the mock attestation authority.

The repository supports exactly one suite: X25519 key agreement, Ed25519
signatures, ChaCha20-Poly1305 records and a TLS 1.2 style P_SHA256 expansion.
All randomness is drawn from an explicit ``numpy.random.Generator`` so two
runs with the same seed produce byte-identical key material.
"""
from __future__ import annotations

import hashlib
import hmac
import struct
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

SUITE = "X25519-Ed25519-CHACHA20POLY1305-SHA256"
NONCE_LEN = 32
MASTER_SECRET_LEN = 48
SESSION_KEY_LEN = 32
PUBLIC_LEN = 64
SIGNATURE_LEN = 64
_COUNTER = struct.Struct("!Q")

BOX_CODE_HASH = hashlib.sha256(b"opsec-box boilerplate v1").digest()


class KeyError_(Exception):
    """Base class for key-module failures (named to avoid shadowing builtins)."""


class AuthenticationFailure(KeyError_):
    pass


class ReplayDetected(KeyError_):
    pass


class UnknownIdentity(KeyError_):
    pass


def prf(secret: bytes, label: bytes, seed: bytes, length: int) -> bytes:
    """TLS 1.2 PRF with HMAC-SHA256 (RFC 5246 section 5)."""
    label_seed = label + seed
    out = b""
    a = label_seed
    while len(out) < length:
        a = hmac.new(secret, a, hashlib.sha256).digest()
        out += hmac.new(secret, a + label_seed, hashlib.sha256).digest()
    return out[:length]


def random_bytes(rng, n: int) -> bytes:
    return bytes(rng.bytes(n))


def fresh_nonce(rng) -> bytes:
    return random_bytes(rng, NONCE_LEN)


@dataclass(frozen=True)
class KeyPair:
    public_part: bytes
    private_part: bytes = field(repr=False)
    algorithm_tag: str = SUITE

    @property
    def dh_public(self) -> bytes:
        return self.public_part[:32]

    @property
    def sign_public(self) -> bytes:
        return self.public_part[32:]


def generate_keypair(rng) -> KeyPair:
    dh_seed = random_bytes(rng, 32)
    sig_seed = random_bytes(rng, 32)
    dh = X25519PrivateKey.from_private_bytes(dh_seed).public_key().public_bytes_raw()
    sg = Ed25519PrivateKey.from_private_bytes(sig_seed).public_key().public_bytes_raw()
    return KeyPair(dh + sg, dh_seed + sig_seed)


def _public_from_private(private_part: bytes) -> bytes:
    dh = X25519PrivateKey.from_private_bytes(private_part[:32]).public_key().public_bytes_raw()
    sg = Ed25519PrivateKey.from_private_bytes(private_part[32:]).public_key().public_bytes_raw()
    return dh + sg


def sign(private_part: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(private_part[32:64]).sign(message)


def verify(public_part: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_part[32:64]).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


# -- master secret and session keys -------------------------------------------

def derive_master_secret(client_nonce: bytes, box_nonce: bytes, shared_entropy: bytes) -> bytes:
    if not shared_entropy:
        raise ValueError("shared_entropy must be non-empty")
    if len(client_nonce) != NONCE_LEN or len(box_nonce) != NONCE_LEN:
        raise ValueError("nonces must be 32 octets")
    return prf(shared_entropy, b"master secret", client_nonce + box_nonce, MASTER_SECRET_LEN)


def derive_session_keys(master_secret: bytes, client_nonce: bytes, box_nonce: bytes) -> tuple[bytes, bytes]:
    seed = client_nonce + box_nonce
    key_up = prf(master_secret, b"opsec up", seed, SESSION_KEY_LEN)
    key_down = prf(master_secret, b"opsec down", seed, SESSION_KEY_LEN)
    return key_up, key_down


def derive_alert_key(master_secret: bytes, client_nonce: bytes, box_nonce: bytes) -> bytes:
    return prf(master_secret, b"opsec alert", client_nonce + box_nonce, SESSION_KEY_LEN)


def derive_content_keys(content_key: bytes) -> tuple[bytes, bytes]:
    """Directional keys for the end-to-end content key handed to the last hop."""
    return (prf(content_key, b"content up", b"", SESSION_KEY_LEN),
            prf(content_key, b"content down", b"", SESSION_KEY_LEN))


# -- authenticated records ----------------------------------------------------

def _aead_nonce(counter: int) -> bytes:
    return b"\x00\x00\x00\x00" + _COUNTER.pack(counter)


def seal(key: bytes, counter: int, plaintext: bytes) -> bytes:
    """Record = counter (8 octets) || ciphertext+tag; the counter is authenticated."""
    ctr = _COUNTER.pack(counter)
    return ctr + ChaCha20Poly1305(key).encrypt(_aead_nonce(counter), bytes(plaintext), ctr)


def record_counter(record: bytes) -> int:
    if len(record) < _COUNTER.size + 16:
        raise AuthenticationFailure("record too short")
    return _COUNTER.unpack_from(record)[0]


def open_record(key: bytes, counter: int, record: bytes) -> bytes:
    if record_counter(record) != counter:
        raise AuthenticationFailure("record counter mismatch")
    ctr = record[:_COUNTER.size]
    try:
        return ChaCha20Poly1305(key).decrypt(_aead_nonce(counter), record[_COUNTER.size:], ctr)
    except InvalidTag:
        raise AuthenticationFailure("record failed authentication") from None


@dataclass
class RecordSender:
    key: bytes = field(repr=False)
    counter: int = 0

    def seal(self, plaintext: bytes) -> bytes:
        self.counter += 1
        return seal(self.key, self.counter, plaintext)


@dataclass
class RecordReceiver:
    key: bytes = field(repr=False)
    counter: int = 0

    def open(self, record: bytes) -> bytes:
        ctr = record_counter(record)
        pt = open_record(self.key, ctr, record)
        # authenticate first so a forged counter cannot poison the window
        if ctr <= self.counter:
            raise ReplayDetected(f"counter {ctr} already seen (last {self.counter})")
        self.counter = ctr
        return pt


@dataclass
class HopChannel:
    """Per-(client, box) key material delivered in ServReq."""

    master_secret: bytes = field(repr=False)
    client_nonce: bytes
    box_nonce: bytes
    key_up: bytes = field(default=b"", repr=False)
    key_down: bytes = field(default=b"", repr=False)
    send_counter: int = 0
    recv_counter: int = 0

    def __post_init__(self):
        if not self.key_up:
            self.key_up, self.key_down = derive_session_keys(
                self.master_secret, self.client_nonce, self.box_nonce)

    @property
    def alert_key(self) -> bytes:
        return derive_alert_key(self.master_secret, self.client_nonce, self.box_nonce)

    def seal(self, key: bytes, plaintext: bytes) -> bytes:
        self.send_counter += 1
        return seal(key, self.send_counter, plaintext)

    def open(self, key: bytes, record: bytes) -> bytes:
        ctr = record_counter(record)
        pt = open_record(key, ctr, record)
        if ctr <= self.recv_counter:
            raise ReplayDetected(f"counter {ctr} already seen (last {self.recv_counter})")
        self.recv_counter = ctr
        return pt


# -- sealing to a public key -------------------------------------------------

def _seal_key(shared: bytes, eph_pub: bytes, recipient_dh: bytes) -> bytes:
    return prf(shared, b"opsec seal", eph_pub + recipient_dh, 32)


def asym_seal(public_part: bytes, plaintext: bytes, rng) -> bytes:
    eph = X25519PrivateKey.from_private_bytes(random_bytes(rng, 32))
    eph_pub = eph.public_key().public_bytes_raw()
    recipient_dh = public_part[:32]
    shared = eph.exchange(X25519PublicKey.from_public_bytes(recipient_dh))
    key = _seal_key(shared, eph_pub, recipient_dh)
    return eph_pub + ChaCha20Poly1305(key).encrypt(b"\x00" * 12, bytes(plaintext), eph_pub + recipient_dh)


def asym_open(private_part: bytes, blob: bytes) -> bytes:
    if len(blob) < 32 + 16:
        raise AuthenticationFailure("sealed blob too short")
    priv = X25519PrivateKey.from_private_bytes(private_part[:32])
    recipient_dh = priv.public_key().public_bytes_raw()
    eph_pub = blob[:32]
    try:
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    except ValueError:
        raise AuthenticationFailure("bad ephemeral key") from None
    key = _seal_key(shared, eph_pub, recipient_dh)
    try:
        return ChaCha20Poly1305(key).decrypt(b"\x00" * 12, blob[32:], eph_pub + recipient_dh)
    except InvalidTag:
        raise AuthenticationFailure("sealed blob does not open under this key") from None


# -- transcripts -------------------------------------------------------------

def _transcript_digest(servdisc_bytes: bytes, servreq_bytes: bytes) -> bytes:
    h = hashlib.sha256(b"opsec transcript")
    for part in (servdisc_bytes, servreq_bytes):
        h.update(struct.pack("!I", len(part)))
        h.update(part)
    return h.digest()


def sign_transcript(private_part: bytes, servdisc_bytes: bytes, servreq_bytes: bytes) -> bytes:
    return sign(private_part, _transcript_digest(servdisc_bytes, servreq_bytes))


def verify_transcript(public_part: bytes, servdisc_bytes: bytes, servreq_bytes: bytes,
                      signature: bytes) -> bool:
    return verify(public_part, _transcript_digest(servdisc_bytes, servreq_bytes), signature)


# -- attestation -------------------------------------------------------------

_QUOTE = struct.Struct("!I32s32s64s")
QUOTE_LEN = _QUOTE.size


@dataclass(frozen=True)
class AttestationQuote:
    box_identity: int
    code_hash: bytes
    key_digest: bytes  # sha256 of the box public key the quote vouches for
    authority_signature: bytes

    def signed_bytes(self) -> bytes:
        return quote_body(self.box_identity, self.code_hash, self.key_digest)

    def to_bytes(self) -> bytes:
        return _QUOTE.pack(self.box_identity, self.code_hash, self.key_digest, self.authority_signature)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "AttestationQuote":
        return cls(*_QUOTE.unpack(raw))


def quote_body(box_identity: int, code_hash: bytes, key_digest: bytes) -> bytes:
    return b"opsec quote" + struct.pack("!I", box_identity) + code_hash + key_digest


def key_digest(public_part: bytes) -> bytes:
    return hashlib.sha256(public_part).digest()


class AttestationAuthority:
    """Stand-in for the TEE vendor's attestation service."""

    def __init__(self, rng):
        self._keys = generate_keypair(rng)
        self._registry: set[tuple[int, bytes]] = set()

    @property
    def public(self) -> bytes:
        return self._keys.public_part

    def register(self, box_identity: int, code_hash: bytes = BOX_CODE_HASH) -> None:
        self._registry.add((box_identity, bytes(code_hash)))

    def is_registered(self, box_identity: int, code_hash: bytes) -> bool:
        return (box_identity, bytes(code_hash)) in self._registry

    def issue_quote(self, box_identity: int, code_hash: bytes, public_part: bytes) -> AttestationQuote:
        if not self.is_registered(box_identity, code_hash):
            raise UnknownIdentity(f"box {box_identity} with this code hash is not registered")
        kd = key_digest(public_part)
        sig = sign(self._keys.private_part, quote_body(box_identity, code_hash, kd))
        return AttestationQuote(box_identity, bytes(code_hash), kd, sig)


def issue_quote(authority: AttestationAuthority, box_identity: int, code_hash: bytes,
                public_part: bytes) -> AttestationQuote:
    return authority.issue_quote(box_identity, code_hash, public_part)


def verify_quote(authority_public: bytes, quote: AttestationQuote,
                 public_part: bytes | None = None,
                 expected_code_hash: bytes = BOX_CODE_HASH) -> bool:
    """True iff the authority signed this (identity, code hash, key) triple.

    The authority only signs registered pairs, so a valid signature implies
    registration. ``public_part``, when given, must be the key the quote vouches for.
    """
    if quote.code_hash != expected_code_hash:
        return False
    if public_part is not None and key_digest(public_part) != quote.key_digest:
        return False
    return verify(authority_public, quote.signed_bytes(), quote.authority_signature)
