"""Dishonest ISP behaviors applied at the ISP's edge, outside any box enclave."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

from .. import payloads as pl
from ..keys import AttestationQuote, BOX_CODE_HASH, KeyPair, key_digest, quote_body, sign
from ..origin import Response, parse_request_path
from ..portplan import PacketClass, PacketHeader, PortRegistry, classify
from ..wire import (MessageType, OpsecMessage, embed_in_path, encode_messages, extract_from_path,
                    find_tokens, decode_messages, _b64, _unb64)


class Adversary(enum.Enum):
    HONEST = "honest"
    DROPS_OPSEC = "drops_opsec"
    TAMPERS_SERVDISC = "tampers_servdisc"
    FAKE_QUOTE = "fake_quote"


@dataclass
class AdversaryState:
    kind: Adversary
    registry: PortRegistry
    rng: object
    own_box_id: int = 0
    own_keys: KeyPair | None = None  # self-made "authority" for fake quotes
    target: str = "servdisc"         # servdisc | servreq
    mode: str = "sfid"               # sfid: flip a byte of one SF id; byte: flip any byte of the message
    dropped: int = 0
    tampered: int = 0
    faked: int = 0


def _mutate_message(m: OpsecMessage, st: AdversaryState) -> bytes:
    """Encoded bytes of ``m`` with one byte changed."""
    raw = bytearray(encode_messages([m]))
    if st.mode == "sfid" and m.msg_type is MessageType.SERV_DISC and len(m.payload) > 2:
        n = (len(m.payload) - 2) // (1 + pl.SF_ID_LEN)
        k = int(st.rng.integers(n))
        i = 14 + 2 + k * (1 + pl.SF_ID_LEN) + 1 + int(st.rng.integers(pl.SF_ID_LEN))
    else:
        i = int(st.rng.integers(len(raw)))
    raw[i] ^= 1 << int(st.rng.integers(8))
    return bytes(raw)


def _tamper_request(pkt: PacketHeader, st: AdversaryState) -> PacketHeader:
    path = parse_request_path(pkt.payload)
    if not path or not find_tokens(path):
        return pkt
    tok = find_tokens(path)[0]
    msgs = extract_from_path(tok)
    want = MessageType.SERV_DISC if st.target == "servdisc" else MessageType.SERV_REQ
    if not any(m.msg_type is want and m.box_id == 0 for m in msgs):
        return pkt
    parts = []
    done = False
    for m in msgs:
        if not done and m.msg_type is want and m.box_id == 0:
            parts.append(_mutate_message(m, st))
            done = True
        else:
            parts.append(encode_messages([m]))
    new_tok = "/.opsec/" + _b64(b"".join(parts))
    st.tampered += 1
    line, sep, rest = pkt.payload.partition(b"\r\n")
    return replace(pkt, payload=line.replace(tok.encode(), new_tok.encode(), 1) + sep + rest)


def _fake_quotes_in(text: str, st: AdversaryState) -> str:
    for tok in find_tokens(text):
        raw = _unb64(tok.split("/", 2)[2])
        msgs = decode_messages(raw)
        out, changed = [], False
        for m in msgs:
            if m.msg_type is MessageType.OB_HELLO and m.box_id == st.own_box_id:
                h = pl.decode_obhello(m.payload)
                kd = key_digest(h.public)
                q = AttestationQuote(m.box_id, BOX_CODE_HASH, kd,
                                     sign(st.own_keys.private_part, quote_body(m.box_id, BOX_CODE_HASH, kd)))
                m = OpsecMessage(m.msg_type, m.box_id, pl.encode_obhello(pl.ObHello(h.flags, h.public, h.nonce, q)))
                changed = True
            out.append(m)
        if changed:
            st.faked += 1
            text = text.replace(tok, embed_in_path(out), 1)
    return text


def apply_adversary(st: AdversaryState, pkt: PacketHeader) -> PacketHeader | None:
    """Apply the ISP's misbehavior to a packet leaving it; None means dropped."""
    if st.kind is Adversary.HONEST:
        return pkt
    if st.kind is Adversary.DROPS_OPSEC:
        if classify(pkt, st.registry) is not PacketClass.LEGACY:
            st.dropped += 1
            return None
        return pkt
    if pkt.kind != "data":
        return pkt
    if st.kind is Adversary.TAMPERS_SERVDISC:
        if pkt.direction.value == "up":
            return _tamper_request(pkt, st)
        return pkt
    if st.kind is Adversary.FAKE_QUOTE:
        path = parse_request_path(pkt.payload)
        if path is not None:
            new = _fake_quotes_in(path, st)
            if new != path:
                line, sep, rest = pkt.payload.partition(b"\r\n")
                return replace(pkt, payload=line.replace(path.encode(), new.encode(), 1) + sep + rest)
            return pkt
        resp = Response.from_bytes(pkt.payload)
        if resp is not None and find_tokens(resp.body):
            body = _fake_quotes_in(resp.body, st)
            if body != resp.body:
                return replace(pkt, payload=Response(resp.status, resp.reason, resp.headers, body).to_bytes())
    return pkt
