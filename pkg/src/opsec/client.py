"""Opsec client: SFC request, two-round handshake, assignment and data records.

Round 1 sends OpsecHello + ServDisc in a GET path towards p*; boxes append
ObHello + ServAnn either to the request (upstream, reflected back by the
server) or to a trailer line of the response (downstream). Round 2 sends
ServReq with one sealed secret per selected box; boxes answer with ObReady.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

from . import payloads as pl
from .keys import (AuthenticationFailure, HopChannel, KeyPair, RecordReceiver, RecordSender,
                   ReplayDetected, asym_seal, derive_content_keys, derive_master_secret,
                   fresh_nonce, generate_keypair, random_bytes, verify_quote, verify_transcript)
from .origin import Response, format_request
from .portplan import DEFAULT_EPHEMERAL, Direction, FlowPortState, PacketHeader, PortRegistry, pack_ts
from .wire import (DEFAULT_PATH_BUDGET, MessageType, OpsecMessage, PayloadTooLong, embed_in_path,
                   embedded_path_length, encode_message, extract_from_path, find_tokens)

log = logging.getLogger(__name__)

CLIENT_TYPES = (MessageType.OPSEC_HELLO, MessageType.SERV_DISC, MessageType.SERV_REQ)


class SessionState(enum.Enum):
    IDLE = "idle"
    AWAIT_RESPONSE_1 = "await_response_1"
    AWAIT_RESPONSE_2 = "await_response_2"
    READY = "ready"
    ABORTED = "aborted"
    TERMINATED = "terminated"


class AssignmentRule(enum.Enum):
    FIRST_WILLING_IN_PATH_ORDER = "first_willing_in_path_order"


class FailMode(enum.Enum):
    FAIL_OPEN = "fail_open"
    FAIL_CLOSED = "fail_closed"


class AbortReason(enum.Enum):
    PATH_BUDGET_EXCEEDED = "path budget exceeded"
    NO_WILLING_BOX = "no willing box"
    TRANSCRIPT_TAMPERED = "transcript tampered"
    CONNECTION_REFUSED = "connection refused"


class SessionNotReady(Exception):
    pass


@dataclass(frozen=True)
class SfcSpec:
    sfc_up: tuple = ()
    sfc_down: tuple = ()

    @property
    def empty(self) -> bool:
        return not self.sfc_up and not self.sfc_down

    def entries(self) -> list[tuple[int, bytes]]:
        return [(pl.UP, s) for s in self.sfc_up] + [(pl.DOWN, s) for s in self.sfc_down]


@dataclass(frozen=True)
class SessionPolicy:
    assignment_rule: AssignmentRule = AssignmentRule.FIRST_WILLING_IN_PATH_ORDER
    fail_mode: FailMode = FailMode.FAIL_OPEN
    path_budget: int = DEFAULT_PATH_BUDGET


@dataclass(frozen=True)
class Target:
    addr: str
    p_s: int = 443
    host: str = "origin.example"
    tls_like: bool = False


@dataclass
class DiscoveredBox:
    box_id: int
    public: bytes
    nonce: bytes
    quote: object
    flags: int
    announced: tuple = ()
    verified: bool = False
    seen_up: int | None = None    # position among upstream appends
    seen_down: int | None = None  # position among downstream appends


@dataclass(frozen=True)
class GetRequest:
    path: str
    dst_port: int
    ts_val: int
    payload: bytes


@dataclass(frozen=True)
class Notification:
    box_id: int
    sfid: bytes
    verdict: pl.VerdictKind
    reason: str


@dataclass
class ClientSession:
    state: SessionState
    target: Target
    ports: FlowPortState | None
    sfc: SfcSpec
    policy: SessionPolicy
    authority_public: bytes = b""
    client_addr: str = ""
    keypair: KeyPair | None = field(default=None, repr=False)
    nonce: bytes = b""
    session_id: bytes = b""
    discovered: dict = field(default_factory=dict)
    assignments: list = field(default_factory=list)  # of payloads.Assignment
    channels: dict = field(default_factory=dict, repr=False)
    transcript: dict = field(default_factory=dict, repr=False)
    sent: list = field(default_factory=list, repr=False)  # client messages of the current round
    up_chain: list = field(default_factory=list)    # selected box ids, client-nearest first
    down_chain: list = field(default_factory=list)  # selected box ids, server-nearest first
    abort_reason: AbortReason | None = None
    rounds: int = 0
    opsec_ports: bool = True
    notifications: list = field(default_factory=list)
    spoofed_alerts: int = 0
    unprotected_down: int = 0
    content_key: bytes = field(default=b"", repr=False)
    _up_tx: RecordSender | None = field(default=None, repr=False)
    _up_owner: int = 0
    _up_tls: bool = False
    _down_rx: dict = field(default_factory=dict, repr=False)
    _down_tls: RecordReceiver | None = field(default=None, repr=False)
    _alert_rx: dict = field(default_factory=dict, repr=False)

    def assignments_by_sf(self) -> dict:
        return {a.sfid: a.box_id for a in self.assignments}

    def _abort(self, reason: AbortReason):
        log.info("session %s aborted: %s", self.session_id.hex(), reason.value)
        self.state = SessionState.ABORTED
        self.abort_reason = reason
        return self, None


def _choose_ports(target: Target, registry: PortRegistry, rng, p_c: int | None) -> FlowPortState:
    eligible = registry.ports_for(target.p_s)
    if not eligible:
        raise ValueError(f"no Opsec port binds to {target.p_s}")
    p_star = int(eligible[int(rng.integers(len(eligible)))])
    if p_c is None:
        lo, hi = DEFAULT_EPHEMERAL
        p_c = int(rng.integers(lo, hi + 1))
    return FlowPortState(p_c=p_c, p_star=p_star, p_s=target.p_s)


def _request(session: ClientSession, messages) -> GetRequest | None:
    if embedded_path_length(messages) > session.policy.path_budget:
        return None
    path = embed_in_path(messages)
    ps = session.ports
    return GetRequest(path, ps.p_star, pack_ts(ps.p_star, ps.p_c),
                      format_request(path, session.target.host))


def begin_session(target: Target, sfc: SfcSpec, policy: SessionPolicy, rng,
                  registry: PortRegistry | None = None, p_c: int | None = None,
                  authority_public: bytes = b"", client_addr: str = ""):
    """Start a session. Returns (session, first GET or None)."""
    registry = registry or PortRegistry.default()
    session = ClientSession(SessionState.IDLE, target, None, sfc, policy, authority_public, client_addr)
    if sfc.empty:
        # nothing to protect: plain legacy session
        session.state = SessionState.READY
        session.opsec_ports = False
        return session, None
    session.ports = _choose_ports(target, registry, rng, p_c)
    session.keypair = generate_keypair(rng)
    session.nonce = fresh_nonce(rng)
    session.session_id = pl.session_id(session.keypair.public_part, session.nonce)
    hello = OpsecMessage(MessageType.OPSEC_HELLO, 0, pl.encode_hello(session.keypair.public_part, session.nonce))
    try:
        disc = OpsecMessage(MessageType.SERV_DISC, 0, pl.encode_servdisc(sfc.entries()))
        encode_message(disc)
    except PayloadTooLong:
        return session._abort(AbortReason.PATH_BUDGET_EXCEEDED)
    req = _request(session, [hello, disc])
    if req is None:
        return session._abort(AbortReason.PATH_BUDGET_EXCEEDED)
    session.sent = [hello, disc]
    session.transcript["servdisc"] = encode_message(disc)
    session.state = SessionState.AWAIT_RESPONSE_1
    session.rounds = 1
    return session, req


# -- response parsing -------------------------------------------------------

def _envelopes(resp) -> list[list[OpsecMessage]]:
    if isinstance(resp, (bytes, bytearray)):
        resp = Response.from_bytes(bytes(resp))
    if resp is None:
        return []
    out = []
    for tok in find_tokens(resp.text()):
        msgs = extract_from_path(tok)
        if msgs:
            out.append(msgs)
    return out


def _split(session: ClientSession, envs):
    """Check reflected client messages; split box messages by the way they came back.

    Returns (tampered, reflected, upstream_appends, downstream_appends).
    """
    reflected = False
    ups, downs = [], []
    for msgs in envs:
        client = [m for m in msgs if m.msg_type in CLIENT_TYPES]
        if client:
            if msgs[:len(session.sent)] != session.sent or len(client) != len(session.sent):
                return True, False, [], []
            reflected = True
            ups.extend(msgs[len(session.sent):])
        else:
            downs.extend(msgs)
    return False, reflected, ups, downs


def _collect_boxes(session: ClientSession, ups, downs) -> None:
    anns: dict[int, tuple] = {}
    bad: set[int] = set()
    for where, msgs in (("up", ups), ("down", downs)):
        pos = 0
        for m in msgs:
            if m.box_id == 0:
                continue
            if m.msg_type is MessageType.SERV_ANN:
                try:
                    anns.setdefault(m.box_id, tuple(pl.decode_servann(m.payload)))
                except pl.PayloadError:
                    bad.add(m.box_id)
                continue
            if m.msg_type is not MessageType.OB_HELLO:
                continue
            try:
                h = pl.decode_obhello(m.payload)
            except (pl.PayloadError, Exception):
                bad.add(m.box_id)
                continue
            box = session.discovered.get(m.box_id)
            if box is None:
                ok = (h.quote.box_identity == m.box_id
                      and verify_quote(session.authority_public, h.quote, h.public))
                box = DiscoveredBox(m.box_id, h.public, h.nonce, h.quote, h.flags, verified=ok)
                session.discovered[m.box_id] = box
            elif (box.public, box.nonce) != (h.public, h.nonce):
                bad.add(m.box_id)  # two different identities under one id
            box.flags |= h.flags & (pl.COVERS_UP | pl.COVERS_DOWN)
            if where == "up" and box.seen_up is None:
                box.seen_up = pos
            if where == "down" and box.seen_down is None:
                box.seen_down = pos
            pos += 1
    for bid, box in session.discovered.items():
        box.announced = anns.get(bid, ())
        if bid in bad:
            box.verified = False


def _path_orders(session: ClientSession, reflected: bool) -> tuple[list[int], list[int]]:
    boxes = [b for b in session.discovered.values() if b.verified]
    down = [b.box_id for b in sorted((b for b in boxes if b.seen_down is not None and b.flags & pl.COVERS_DOWN),
                                     key=lambda b: b.seen_down)]
    if reflected:
        up = [b.box_id for b in sorted((b for b in boxes if b.seen_up is not None and b.flags & pl.COVERS_UP),
                                       key=lambda b: b.seen_up)]
    else:
        # without reflection only two-direction boxes show up, on the return
        # path, whose order is the reverse of the forward path
        up = [bid for bid in reversed(down) if session.discovered[bid].flags & pl.COVERS_UP]
    return up, down


def assign_chain(chain, order: list[int], announced: dict) -> list[int | None]:
    """First willing box in path order, never moving backwards along the path,
    so a chain [f1, f2] always runs f1 before f2."""
    out: list[int | None] = []
    idx = 0
    for sfid in chain:
        h = pl.announce_hash(sfid)
        hit = None
        for j in range(idx, len(order)):
            if h in announced.get(order[j], ()):
                hit = j
                break
        if hit is None:
            out.append(None)
        else:
            out.append(order[hit])
            idx = hit
    return out


def on_response_1(session: ClientSession, response, rng):
    """Handle the reflected round-1 response. Returns (session, second GET or None)."""
    if session.state is not SessionState.AWAIT_RESPONSE_1:
        raise SessionNotReady(f"session in state {session.state.value}")
    tampered, reflected, ups, downs = _split(session, _envelopes(response))
    if tampered:
        return session._abort(AbortReason.TRANSCRIPT_TAMPERED)
    _collect_boxes(session, ups, downs)
    up, down = _path_orders(session, reflected)
    announced = {b.box_id: b.announced for b in session.discovered.values()}
    up_assign = assign_chain(session.sfc.sfc_up, up, announced)
    down_assign = assign_chain(session.sfc.sfc_down, down, announced)
    if None in up_assign or None in down_assign:
        if session.policy.fail_mode is FailMode.FAIL_CLOSED:
            return session._abort(AbortReason.NO_WILLING_BOX)
        log.warning("session %s: some SFs have no willing box, continuing unprotected for them",
                    session.session_id.hex())
    assignments = []
    for d, chain, picks in ((pl.UP, session.sfc.sfc_up, up_assign), (pl.DOWN, session.sfc.sfc_down, down_assign)):
        for pos, (sfid, bid) in enumerate(zip(chain, picks)):
            if bid is not None:
                assignments.append(pl.Assignment(d, pos, sfid, bid))
    session.assignments = assignments
    session.up_chain = [b for b in up if any(a.box_id == b and a.direction == pl.UP for a in assignments)]
    session.down_chain = [b for b in down if any(a.box_id == b and a.direction == pl.DOWN for a in assignments)]
    selected = list(dict.fromkeys(session.up_chain + session.down_chain))
    if session.target.tls_like:
        session.content_key = random_bytes(rng, 32)
    if not selected:
        _setup_data_plane(session)
        session.opsec_ports = False
        session.state = SessionState.READY
        return session, None
    for bid in selected:
        box = session.discovered[bid]
        ms = derive_master_secret(session.nonce, box.nonce, random_bytes(rng, 48))
        session.channels[bid] = HopChannel(ms, session.nonce, box.nonce)
    secrets = []
    for bid in selected:
        secrets.append((bid, asym_seal(session.discovered[bid].public,
                                       pl.encode_box_secret(_secret_for(session, bid)), rng)))
    req = pl.ServReq(session.session_id, tuple(assignments), tuple(secrets))
    msg = OpsecMessage(MessageType.SERV_REQ, 0, pl.encode_servreq(req))
    get = _request(session, [msg])
    if get is None:
        return session._abort(AbortReason.PATH_BUDGET_EXCEEDED)
    session.sent = [msg]
    session.transcript["servreq"] = encode_message(msg)
    session.state = SessionState.AWAIT_RESPONSE_2
    session.rounds = 2
    return session, get


def _secret_for(session: ClientSession, bid: int) -> pl.BoxSecret:
    ch = session.channels[bid]
    flags = 0
    nxt_box, nxt_key, prv_box, prv_key = 0, b"", 0, b""
    content = b""
    if bid in session.up_chain:
        flags |= pl.SERVES_UP
        i = session.up_chain.index(bid)
        if i + 1 < len(session.up_chain):
            nxt_box = session.up_chain[i + 1]
            nxt_key = session.channels[nxt_box].key_up
            flags |= pl.HAS_NEXT_UP
        elif session.content_key:
            content = session.content_key
    if bid in session.down_chain:
        flags |= pl.SERVES_DOWN
        j = session.down_chain.index(bid)
        if j > 0:
            prv_box = session.down_chain[j - 1]
            prv_key = session.channels[prv_box].key_down
            flags |= pl.HAS_PREV_DOWN
        elif session.content_key:
            content = session.content_key
    if content:
        flags |= pl.HAS_CONTENT_KEY
    return pl.BoxSecret(ch.master_secret, flags, nxt_box, nxt_key, prv_box, prv_key, content)


def on_response_2(session: ClientSession, response) -> ClientSession:
    if session.state is not SessionState.AWAIT_RESPONSE_2:
        raise SessionNotReady(f"session in state {session.state.value}")
    tampered, _reflected, ups, downs = _split(session, _envelopes(response))
    if tampered:
        session._abort(AbortReason.TRANSCRIPT_TAMPERED)
        return session
    readies: dict[int, bytes] = {}
    for m in ups + downs:
        if m.msg_type is MessageType.OB_READY and m.box_id != 0:
            readies.setdefault(m.box_id, m.payload)
    disc, sreq = session.transcript["servdisc"], session.transcript["servreq"]
    silent = []
    for bid in session.channels:
        sig = readies.get(bid)
        if sig is None:
            silent.append(bid)
            continue
        if not verify_transcript(session.discovered[bid].public, disc, sreq, sig):
            session._abort(AbortReason.TRANSCRIPT_TAMPERED)
            return session
    if silent:
        if session.policy.fail_mode is FailMode.FAIL_CLOSED:
            session._abort(AbortReason.NO_WILLING_BOX)
            return session
        log.warning("session %s: boxes %s never confirmed, their SFs are void",
                    session.session_id.hex(), silent)
        session.assignments = [a for a in session.assignments if a.box_id not in silent]
        session.up_chain = [b for b in session.up_chain if b not in silent]
        session.down_chain = [b for b in session.down_chain if b not in silent]
        for bid in silent:
            del session.channels[bid]
    _setup_data_plane(session)
    session.opsec_ports = bool(session.channels)
    session.state = SessionState.READY
    return session


def _setup_data_plane(session: ClientSession) -> None:
    cu = cd = b""
    if session.content_key:
        cu, cd = derive_content_keys(session.content_key)
    if session.up_chain:
        first = session.up_chain[0]
        session._up_tx = RecordSender(session.channels[first].key_up)
        session._up_owner = first
    elif cu:
        session._up_tx = RecordSender(cu)
        session._up_tls = True
    session._down_rx = {b: RecordReceiver(session.channels[b].key_down) for b in session.down_chain}
    if cd and not session.down_chain:
        session._down_tls = RecordReceiver(cd)
    session._alert_rx = {b: RecordReceiver(ch.alert_key) for b, ch in session.channels.items()}


def fallback_legacy(session: ClientSession) -> ClientSession:
    """The p* connection was refused (no Opsec ISP rewrote it)."""
    if session.policy.fail_mode is FailMode.FAIL_CLOSED:
        session._abort(AbortReason.CONNECTION_REFUSED)
        return session
    session.assignments, session.channels = [], {}
    session.up_chain, session.down_chain = [], []
    session.opsec_ports = False
    _setup_data_plane(session)
    session.state = SessionState.READY
    return session


# -- data phase ----------------------------------------------------------------

def seal_app_data(session: ClientSession, plaintext: bytes) -> bytes:
    if session.state is not SessionState.READY:
        raise SessionNotReady(f"session in state {session.state.value}")
    if session._up_tx is None:
        return bytes(plaintext)
    if session._up_tls:
        return pl.frame_tls(session._up_tx.seal(plaintext))
    return pl.frame_record(session.session_id, session._up_owner, session._up_tx.seal(plaintext))


def send_app_data(session: ClientSession, plaintext: bytes, src_port: int | None = None) -> list[PacketHeader]:
    payload = seal_app_data(session, plaintext)
    ps = session.ports
    if session.opsec_ports and ps is not None:
        p_c = src_port or ps.p_c
        return [PacketHeader(session.client_addr or "client", session.target.addr, p_c, ps.p_star,
                             ts_val=pack_ts(ps.p_star, p_c), direction=Direction.UP, payload=payload)]
    p_c = src_port or (ps.p_c if ps else DEFAULT_EPHEMERAL[0])
    return [PacketHeader(session.client_addr or "client", session.target.addr, p_c, session.target.p_s,
                         direction=Direction.UP, payload=payload)]


def recv_app_data(session: ClientSession, payload: bytes) -> bytes | None:
    """Open a downstream payload; None when it fails authentication."""
    rec = pl.parse_record(payload)
    try:
        if rec is not None and rec[0] == session.session_id:
            rx = session._down_rx.get(rec[1])
            return None if rx is None else rx.open(rec[2])
        tls = pl.parse_tls(payload)
        if tls is not None and session._down_tls is not None:
            return session._down_tls.open(tls)
    except (AuthenticationFailure, ReplayDetected):
        return None
    if session.down_chain:
        session.unprotected_down += 1
    return payload


def on_alert(session: ClientSession, payload: bytes) -> Notification | None:
    parsed = pl.parse_alert(payload)
    if parsed is None or parsed[0] != session.session_id:
        session.spoofed_alerts += 1
        return None
    _sid, bid, sealed = parsed
    rx = session._alert_rx.get(bid)
    try:
        if rx is None:
            raise AuthenticationFailure("alert from a box without a channel")
        sfid, verdict, reason = pl.decode_alert_body(rx.open(sealed))
    except (AuthenticationFailure, ReplayDetected, pl.PayloadError, ValueError):
        session.spoofed_alerts += 1
        return None
    note = Notification(bid, sfid, verdict, reason)
    session.notifications.append(note)
    if verdict is pl.VerdictKind.TERMINATE:
        session.state = SessionState.TERMINATED
    log.warning("alert from box %d: %s (%s)", bid, reason, verdict.name)
    return note
