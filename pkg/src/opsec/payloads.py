"""Payload schemas of the six handshake messages, plus data/alert record framing.

All fields are fixed width or length-prefixed, integers big-endian::

    OpsecHello  client_public(64) | client_nonce(32)
    ServDisc    count(2) | count * (direction(1) | sf_id(32))
    ObHello     flags(1) | box_public(64) | box_nonce(32) | quote(132)
    ServAnn     count(2) | count * announce_hash(32)
    ServReq     session(8) | n(2) | n * (direction(1) | position(2) | sf_id(32) | box_id(4))
                | k(2) | k * (box_id(4) | len(2) | sealed_blob)
    ObReady     transcript_signature(64)

The secret sealed to each selected box is::

    master_secret(48) | flags(1) | next_up_box(4) | next_up_key(32)
    | prev_down_box(4) | prev_down_key(32) | content_key(32)

Data records travel as ``"OPR1" | session(8) | key_owner(4) | sealed record``
where ``key_owner`` is the box whose channel key sealed the record (0 for the
client's content key). Alerts travel as ``"OPA1" | session(8) | box_id(4) | sealed alert``.
TLS-like last hops carry ``17 03 03 | sealed record`` under the content key.
"""
from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass

from .keys import NONCE_LEN, PUBLIC_LEN, QUOTE_LEN, SIGNATURE_LEN, AttestationQuote

SF_ID_LEN = 32
SESSION_ID_LEN = 8
RECORD_MAGIC = b"OPR1"
ALERT_MAGIC = b"OPA1"

UP, DOWN = 0, 1

COVERS_UP = 0x01
COVERS_DOWN = 0x02
APPENDED_DOWNSTREAM = 0x04

HAS_NEXT_UP = 0x01
HAS_PREV_DOWN = 0x02
HAS_CONTENT_KEY = 0x04
SERVES_UP = 0x08
SERVES_DOWN = 0x10


class PayloadError(ValueError):
    pass


def sf_id(name: str) -> bytes:
    """Directory id of a security function (static in-scenario directory)."""
    return hashlib.sha256(b"opsec sf " + name.encode()).digest()


def announce_hash(sfid: bytes) -> bytes:
    """ServAnn entry for ``sfid``: a re-digest of the id."""
    return hashlib.sha256(b"opsec announce" + sfid).digest()


def session_id(client_public: bytes, client_nonce: bytes) -> bytes:
    return hashlib.sha256(b"opsec session" + client_public + client_nonce).digest()[:SESSION_ID_LEN]


def _need(buf: bytes, off: int, n: int) -> None:
    if off + n > len(buf):
        raise PayloadError("truncated payload")


# -- OpsecHello ---------------------------------------------------------------

def encode_hello(client_public: bytes, client_nonce: bytes) -> bytes:
    return client_public + client_nonce


def decode_hello(raw: bytes) -> tuple[bytes, bytes]:
    if len(raw) != PUBLIC_LEN + NONCE_LEN:
        raise PayloadError("bad OpsecHello length")
    return raw[:PUBLIC_LEN], raw[PUBLIC_LEN:]


# -- ServDisc -----------------------------------------------------------------

def encode_servdisc(entries) -> bytes:
    entries = list(entries)
    out = [struct.pack("!H", len(entries))]
    for direction, sfid in entries:
        out.append(struct.pack("!B", direction) + sfid)
    return b"".join(out)


def decode_servdisc(raw: bytes) -> list[tuple[int, bytes]]:
    _need(raw, 0, 2)
    (n,) = struct.unpack_from("!H", raw)
    if len(raw) != 2 + n * (1 + SF_ID_LEN):
        raise PayloadError("bad ServDisc length")
    out = []
    off = 2
    for _ in range(n):
        d = raw[off]
        if d not in (UP, DOWN):
            raise PayloadError("bad direction tag")
        out.append((d, raw[off + 1:off + 1 + SF_ID_LEN]))
        off += 1 + SF_ID_LEN
    return out


# -- ObHello ------------------------------------------------------------------

@dataclass(frozen=True)
class ObHello:
    flags: int
    public: bytes
    nonce: bytes
    quote: AttestationQuote

    @property
    def covers_up(self) -> bool:
        return bool(self.flags & COVERS_UP)

    @property
    def covers_down(self) -> bool:
        return bool(self.flags & COVERS_DOWN)

    @property
    def appended_downstream(self) -> bool:
        return bool(self.flags & APPENDED_DOWNSTREAM)


def encode_obhello(h: ObHello) -> bytes:
    return struct.pack("!B", h.flags) + h.public + h.nonce + h.quote.to_bytes()


def decode_obhello(raw: bytes) -> ObHello:
    if len(raw) != 1 + PUBLIC_LEN + NONCE_LEN + QUOTE_LEN:
        raise PayloadError("bad ObHello length")
    off = 1
    public = raw[off:off + PUBLIC_LEN]
    off += PUBLIC_LEN
    nonce = raw[off:off + NONCE_LEN]
    off += NONCE_LEN
    return ObHello(raw[0], public, nonce, AttestationQuote.from_bytes(raw[off:]))


# -- ServAnn ------------------------------------------------------------------

def encode_servann(hashes) -> bytes:
    hashes = list(hashes)
    return struct.pack("!H", len(hashes)) + b"".join(hashes)


def decode_servann(raw: bytes) -> list[bytes]:
    _need(raw, 0, 2)
    (n,) = struct.unpack_from("!H", raw)
    if len(raw) != 2 + 32 * n:
        raise PayloadError("bad ServAnn length")
    return [raw[2 + 32 * i:2 + 32 * (i + 1)] for i in range(n)]


# -- ServReq ------------------------------------------------------------------

@dataclass(frozen=True)
class Assignment:
    direction: int
    position: int
    sfid: bytes
    box_id: int


@dataclass(frozen=True)
class ServReq:
    session: bytes
    assignments: tuple[Assignment, ...]
    secrets: tuple[tuple[int, bytes], ...]  # (box_id, sealed blob)

    def secret_for(self, box_id: int) -> bytes | None:
        for b, blob in self.secrets:
            if b == box_id:
                return blob
        return None

    def assigned_to(self, box_id: int, direction: int) -> list[Assignment]:
        return sorted((a for a in self.assignments if a.box_id == box_id and a.direction == direction),
                      key=lambda a: a.position)


def encode_servreq(req: ServReq) -> bytes:
    out = [req.session, struct.pack("!H", len(req.assignments))]
    for a in req.assignments:
        out.append(struct.pack("!BH", a.direction, a.position) + a.sfid + struct.pack("!I", a.box_id))
    out.append(struct.pack("!H", len(req.secrets)))
    for box_id, blob in req.secrets:
        out.append(struct.pack("!IH", box_id, len(blob)) + blob)
    return b"".join(out)


def decode_servreq(raw: bytes) -> ServReq:
    _need(raw, 0, SESSION_ID_LEN + 2)
    session = raw[:SESSION_ID_LEN]
    off = SESSION_ID_LEN
    (n,) = struct.unpack_from("!H", raw, off)
    off += 2
    assignments = []
    for _ in range(n):
        _need(raw, off, 3 + SF_ID_LEN + 4)
        d, pos = struct.unpack_from("!BH", raw, off)
        off += 3
        sfid = raw[off:off + SF_ID_LEN]
        off += SF_ID_LEN
        (box_id,) = struct.unpack_from("!I", raw, off)
        off += 4
        assignments.append(Assignment(d, pos, sfid, box_id))
    _need(raw, off, 2)
    (k,) = struct.unpack_from("!H", raw, off)
    off += 2
    secrets = []
    for _ in range(k):
        _need(raw, off, 6)
        box_id, ln = struct.unpack_from("!IH", raw, off)
        off += 6
        _need(raw, off, ln)
        secrets.append((box_id, raw[off:off + ln]))
        off += ln
    if off != len(raw):
        raise PayloadError("trailing bytes in ServReq")
    return ServReq(session, tuple(assignments), tuple(secrets))


@dataclass(frozen=True)
class BoxSecret:
    master_secret: bytes
    flags: int
    next_up_box: int = 0
    next_up_key: bytes = b""
    prev_down_box: int = 0
    prev_down_key: bytes = b""
    content_key: bytes = b""


_ZERO32 = b"\x00" * 32
BOX_SECRET_LEN = 48 + 1 + 4 + 32 + 4 + 32 + 32


def encode_box_secret(s: BoxSecret) -> bytes:
    return (s.master_secret + struct.pack("!BI", s.flags, s.next_up_box) + (s.next_up_key or _ZERO32)
            + struct.pack("!I", s.prev_down_box) + (s.prev_down_key or _ZERO32)
            + (s.content_key or _ZERO32))


def decode_box_secret(raw: bytes) -> BoxSecret:
    if len(raw) != BOX_SECRET_LEN:
        raise PayloadError("bad sealed secret length")
    flags, nxt = struct.unpack_from("!BI", raw, 48)
    (prv,) = struct.unpack_from("!I", raw, 85)
    return BoxSecret(raw[:48], flags,
                     nxt if flags & HAS_NEXT_UP else 0,
                     raw[53:85] if flags & HAS_NEXT_UP else b"",
                     prv if flags & HAS_PREV_DOWN else 0,
                     raw[89:121] if flags & HAS_PREV_DOWN else b"",
                     raw[121:153] if flags & HAS_CONTENT_KEY else b"")


# -- ObReady ------------------------------------------------------------------

def encode_obready(signature: bytes) -> bytes:
    return signature


def decode_obready(raw: bytes) -> bytes:
    if len(raw) != SIGNATURE_LEN:
        raise PayloadError("bad ObReady length")
    return raw


# -- data and alert records ---------------------------------------------------

TLS_MAGIC = b"\x17\x03\x03"


def frame_record(session: bytes, key_owner: int, sealed: bytes) -> bytes:
    return RECORD_MAGIC + session + struct.pack("!I", key_owner) + sealed


def parse_record(payload: bytes) -> tuple[bytes, int, bytes] | None:
    off = 4 + SESSION_ID_LEN
    if not payload.startswith(RECORD_MAGIC) or len(payload) < off + 4:
        return None
    (owner,) = struct.unpack_from("!I", payload, off)
    return payload[4:off], owner, payload[off + 4:]


def frame_tls(sealed: bytes) -> bytes:
    return TLS_MAGIC + sealed


def parse_tls(payload: bytes) -> bytes | None:
    return payload[3:] if payload.startswith(TLS_MAGIC) else None


class VerdictKind(enum.IntEnum):
    PASS = 0
    ALERT = 1
    TERMINATE = 2


def frame_alert(session: bytes, box_id: int, sealed: bytes) -> bytes:
    return ALERT_MAGIC + session + struct.pack("!I", box_id) + sealed


def parse_alert(payload: bytes) -> tuple[bytes, int, bytes] | None:
    if not payload.startswith(ALERT_MAGIC) or len(payload) < 4 + SESSION_ID_LEN + 4:
        return None
    off = 4 + SESSION_ID_LEN
    (box_id,) = struct.unpack_from("!I", payload, off)
    return payload[4:off], box_id, payload[off + 4:]


def encode_alert_body(sfid: bytes, verdict: VerdictKind, reason: str) -> bytes:
    return sfid + struct.pack("!B", int(verdict)) + reason.encode()


def decode_alert_body(raw: bytes) -> tuple[bytes, VerdictKind, str]:
    if len(raw) < SF_ID_LEN + 1:
        raise PayloadError("short alert body")
    return raw[:SF_ID_LEN], VerdictKind(raw[SF_ID_LEN]), raw[SF_ID_LEN + 1:].decode(errors="replace")
