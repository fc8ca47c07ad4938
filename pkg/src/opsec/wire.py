"""Opsec message codec and its embedding in HTTP request paths.

Binary layout of one message (all integers big-endian)::

    +----------+----------+----------+----------+-----------+----------+
    | START(4) | type (2) | box (4)  | len (4)  | payload   | END (4)  |
    +----------+----------+----------+----------+-----------+----------+

The length field is four octets wide but payloads are capped at 65535.

Messages are carried as ``/.opsec/<base64url(m1 || m2 || ...)>`` inside a
GET request path, and come back to the client inside a redirect
``Location`` value or an error body.
"""
from __future__ import annotations

import base64
import binascii
import enum
import re
import struct
from dataclasses import dataclass, field

START_TAG = b"OPS1"
END_TAG = b"1SPO"
OPSEC_PATH_PREFIX = ".opsec"
DEFAULT_PATH_BUDGET = 4096
MAX_PAYLOAD = 0xFFFF

_HEADER = struct.Struct("!4sHII")
HEADER_LEN = _HEADER.size  # 14
OVERHEAD = HEADER_LEN + len(END_TAG)  # 18

# base64url without padding
_TOKEN_RE = re.compile(r"/" + re.escape(OPSEC_PATH_PREFIX) + r"/([A-Za-z0-9_-]+)")


class WireError(Exception):
    pass


class PayloadTooLong(WireError):
    pass


class PathBudgetExceeded(WireError):
    pass


class MessageType(enum.IntEnum):
    OPSEC_HELLO = 0x0001
    SERV_DISC = 0x0002
    OB_HELLO = 0x0003
    SERV_ANN = 0x0004
    SERV_REQ = 0x0005
    OB_READY = 0x0006


@dataclass(frozen=True)
class OpsecMessage:
    msg_type: MessageType
    box_id: int = 0
    payload: bytes = b""

    def __post_init__(self):
        if not 0 <= self.box_id <= 0xFFFFFFFF:
            raise ValueError(f"box_id out of range: {self.box_id}")


@dataclass(frozen=True)
class OpsecEnvelope:
    messages: tuple[OpsecMessage, ...]
    origin_path: str = ""
    budget: int = field(default=DEFAULT_PATH_BUDGET, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "messages", tuple(self.messages))


def encode_message(msg: OpsecMessage) -> bytes:
    payload = bytes(msg.payload)
    if len(payload) > MAX_PAYLOAD:
        raise PayloadTooLong(f"payload of {len(payload)} octets exceeds {MAX_PAYLOAD}")
    return _HEADER.pack(START_TAG, int(msg.msg_type), msg.box_id, len(payload)) + payload + END_TAG


def encode_messages(messages) -> bytes:
    return b"".join(encode_message(m) for m in messages)


def _try_decode_at(buf: bytes, i: int):
    """Decode the candidate starting at ``buf[i]``; return (msg, end) or None."""
    if i + HEADER_LEN > len(buf):
        return None
    _tag, code, box_id, length = _HEADER.unpack_from(buf, i)
    try:
        msg_type = MessageType(code)
    except ValueError:
        return None
    if length > MAX_PAYLOAD:
        return None
    end = i + HEADER_LEN + length
    # length is checked before the end tag is trusted
    if end + len(END_TAG) > len(buf):
        return None
    if buf[end:end + len(END_TAG)] != END_TAG:
        return None
    return OpsecMessage(msg_type, box_id, bytes(buf[i + HEADER_LEN:end])), end + len(END_TAG)


def decode_messages(haystack: bytes) -> list[OpsecMessage]:
    """Scan arbitrary bytes for well-formed messages, in order of appearance."""
    buf = bytes(haystack)
    out: list[OpsecMessage] = []
    i = buf.find(START_TAG)
    while i != -1:
        hit = _try_decode_at(buf, i)
        if hit is None:
            i = buf.find(START_TAG, i + 1)
            continue
        msg, nxt = hit
        out.append(msg)
        i = buf.find(START_TAG, nxt)
    return out


def _b64(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _unb64(text: str) -> bytes:
    pad = (-len(text)) % 4
    if pad == 3:
        raise ValueError("invalid base64url length")
    return base64.urlsafe_b64decode(text + "=" * pad)


def embed_in_path(messages, safe_encoding: bool = True) -> str:
    """Build ``/.opsec/<token>``; ``safe_encoding`` is accepted for API symmetry
    only, the token is always base64url without padding."""
    messages = list(messages)
    if not messages:
        raise ValueError("embed_in_path needs at least one message")
    return f"/{OPSEC_PATH_PREFIX}/{_b64(encode_messages(messages))}"


def embedded_path_length(messages) -> int:
    n = sum(len(m.payload) + OVERHEAD for m in messages)
    return len(OPSEC_PATH_PREFIX) + 2 + (4 * n + 2) // 3


def find_tokens(text: str) -> list[str]:
    """All ``/.opsec/<token>`` occurrences in ``text`` (paths, headers, bodies)."""
    return [m.group(0) for m in _TOKEN_RE.finditer(text)]


def extract_from_path(path: str) -> list[OpsecMessage]:
    m = _TOKEN_RE.search(path or "")
    if m is None:
        return []
    try:
        raw = _unb64(m.group(1))
    except (ValueError, binascii.Error):
        return []
    return decode_messages(raw)


def extract_all(text: str) -> list[list[OpsecMessage]]:
    """Messages from every embedded token in ``text``, one list per token."""
    return [msgs for tok in find_tokens(text) if (msgs := extract_from_path(tok))]


def envelope_from_path(path: str, budget: int = DEFAULT_PATH_BUDGET) -> OpsecEnvelope:
    return OpsecEnvelope(tuple(extract_from_path(path)), path, budget)


def append_to_envelope(env: OpsecEnvelope, msg: OpsecMessage) -> OpsecEnvelope:
    """Append ``msg``; the embedded bytes of earlier messages are left as-is."""
    messages = env.messages + (msg,)
    if embedded_path_length(messages) > env.budget:
        raise PathBudgetExceeded(
            f"embedding {len(messages)} messages needs {embedded_path_length(messages)} "
            f"characters, budget is {env.budget}")
    return OpsecEnvelope(messages, embed_in_path(messages), env.budget)


def replace_token(text: str, old_token: str, new_token: str) -> str:
    return text.replace(old_token, new_token, 1)
