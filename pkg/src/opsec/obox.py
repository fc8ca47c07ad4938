"""Opsec-box: handshake participation, per-hop re-sealing and SF execution.

A box sees every Opsec-classified packet its ISP's edge router redirects to
it, in one or both directions. It rewrites ports (see ``portplan``), appends
its ObHello/ServAnn/ObReady to transiting envelopes, and once selected in a
ServReq opens, inspects and re-seals data records.

Key material, plaintext and flow tables live in ``_Enclave``. The ISP side
(router, adversary controller) only ever holds a ``BoxState`` and reads its
public attributes and the audit log, which carries no secrets.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

from . import payloads as pl
from .keys import (AttestationQuote, AuthenticationFailure, HopChannel, KeyPair, RecordReceiver,
                   RecordSender, ReplayDetected, asym_open, derive_content_keys, fresh_nonce,
                   sign_transcript)
from .origin import Response, format_request, parse_request_path
from .portplan import (Direction, FlowPortState, PacketClass, PacketHeader, PortRegistry,
                       PortSetExhausted, InconsistentState, allocate_hash_port, classify,
                       decode_ts_state, pack_ts, release_hash_port, rewrite_downstream,
                       rewrite_upstream, unpack_ts)
from .wire import (DEFAULT_PATH_BUDGET, MessageType, OpsecEnvelope, OpsecMessage, PathBudgetExceeded,
                   append_to_envelope, embed_in_path, encode_message, envelope_from_path, extract_from_path,
                   find_tokens)

log = logging.getLogger(__name__)

VerdictKind = pl.VerdictKind


class Coverage(enum.Enum):
    UP = "up"
    DOWN = "down"
    BOTH = "both"

    @property
    def up(self) -> bool:
        return self is not Coverage.DOWN

    @property
    def down(self) -> bool:
        return self is not Coverage.UP


@dataclass(frozen=True)
class Verdict:
    kind: VerdictKind = VerdictKind.PASS
    reason: str = ""


PASS = Verdict()


@dataclass(frozen=True)
class FlowContext:
    direction: Direction
    session: bytes
    index: int  # records seen so far in this direction


class SecurityFunction:
    """Plugin interface. ``inspect`` must not mutate anything it is given."""

    name = "sf"
    direction = "both"

    @property
    def id(self) -> bytes:
        return pl.sf_id(self.name)

    def inspect(self, payload: bytes, ctx: FlowContext) -> Verdict:
        raise NotImplementedError


@dataclass
class KeywordIds(SecurityFunction):
    """Signature matcher. ``signatures`` maps a byte pattern to (verdict kind, reason)."""

    name: str = "ids"
    signatures: dict = field(default_factory=dict)
    direction: str = "both"

    def inspect(self, payload, ctx):
        worst = PASS
        for sig, (kind, reason) in self.signatures.items():
            if sig in payload and VerdictKind(kind) > worst.kind:
                worst = Verdict(VerdictKind(kind), reason or f"signature {sig!r}")
        return worst


@dataclass
class UrlBlocklist(SecurityFunction):
    name: str = "url-blocklist"
    blocked: tuple = ()
    verdict: VerdictKind = VerdictKind.TERMINATE
    direction: str = "up"

    def inspect(self, payload, ctx):
        path = parse_request_path(payload)
        if path is None:
            return PASS
        for prefix in self.blocked:
            if path.startswith(prefix):
                return Verdict(self.verdict, f"blocked url {path}")
        return PASS


@dataclass
class ByteCounter(SecurityFunction):
    """No-op SF for load tests."""

    name: str = "byte-counter"
    direction: str = "both"

    def inspect(self, payload, ctx):
        return PASS


# -- enclave ------------------------------------------------------------------

@dataclass
class _PortFlow:
    state: FlowPortState
    first: bool
    client_addr: str
    server_addr: str
    fins: int = 0

    @property
    def conn(self) -> tuple:
        return (self.client_addr, self.server_addr, self.state.p_c, self.state.p_star)


@dataclass
class _Session:
    sid: bytes
    client_nonce: bytes
    box_nonce: bytes
    servdisc_raw: bytes
    requested: list
    phase: str = "discovered"  # discovered | ready
    hello_down_sent: bool = False
    ready_msg: OpsecMessage | None = None
    ready_down_pending: bool = False
    client_addr: str = ""
    server_addr: str = ""
    p_star: int = 0
    channel: HopChannel | None = None
    up_chain: list = field(default_factory=list)
    down_chain: list = field(default_factory=list)
    up_in: RecordReceiver | None = None
    up_out: RecordSender | None = None
    up_out_owner: int = 0
    up_out_tls: bool = False
    down_in: RecordReceiver | None = None
    down_in_owner: int = 0
    down_in_tls: bool = False
    down_out: RecordSender | None = None
    alert_out: RecordSender | None = None
    up_index: int = 0
    down_index: int = 0
    terminated: bool = False
    nacked: bool = False  # answered a damaged ServReq with a signature over what arrived


class _Enclave:
    def __init__(self, keypair: KeyPair):
        self.keypair = keypair
        self.sessions: dict[bytes, _Session] = {}
        self.up_flows: dict[tuple, _PortFlow] = {}
        self.down_flows: dict[tuple, _PortFlow] = {}
        self.conn_session: dict[tuple, bytes] = {}
        self.in_use: set = set()
        self.abstained: set = set()


@dataclass
class BoxOutput:
    forward: PacketHeader | None
    alerts: list = field(default_factory=list)
    charged: bool = False  # data-plane work that costs service time
    note: str = ""


@dataclass
class BoxStats:
    passthrough: int = 0
    rewritten: int = 0
    exhausted: int = 0
    hellos: int = 0
    readies: int = 0
    abstained: int = 0
    auth_failures: int = 0
    records: int = 0
    alerts: int = 0
    dropped: int = 0


class BoxState:
    """One box identity (a pool shares it; instances only split service time)."""

    def __init__(self, box_id: int, keypair: KeyPair, quote: AttestationQuote, catalog,
                 registry: PortRegistry, rng, coverage: Coverage = Coverage.BOTH,
                 path_budget: int = DEFAULT_PATH_BUDGET, willing: bool = True):
        self.box_id = box_id
        self.willing = willing
        self.public = keypair.public_part
        self.quote = quote
        self.catalog = {sf.id: sf for sf in catalog}
        self.registry = registry
        self.coverage = coverage
        self.path_budget = path_budget
        self.stats = BoxStats()
        self.audit: list[tuple] = []
        self._rng = rng
        self._e = _Enclave(keypair)

    def __getstate__(self):
        raise TypeError("box state cannot be exported from the enclave")

    # read-only views that leak no key material
    def session_phase(self, sid: bytes) -> str | None:
        s = self._e.sessions.get(sid)
        return None if s is None else s.phase

    def session_chain(self, sid: bytes, direction: Direction) -> list[str]:
        s = self._e.sessions.get(sid)
        if s is None:
            return []
        chain = s.up_chain if direction is Direction.UP else s.down_chain
        return [sf.name for sf in chain]

    def active_sessions(self) -> int:
        return sum(1 for s in self._e.sessions.values() if s.phase == "ready" and not s.terminated)

    # -- entry point --------------------------------------------------------

    def process(self, pkt: PacketHeader) -> BoxOutput:
        if pkt.direction is Direction.UP:
            return self._process_up(pkt)
        return self._process_down(pkt)

    def _flags(self, downstream: bool) -> int:
        f = 0
        if self.coverage.up:
            f |= pl.COVERS_UP
        if self.coverage.down:
            f |= pl.COVERS_DOWN
        if downstream:
            f |= pl.APPENDED_DOWNSTREAM
        return f

    # -- ports -------------------------------------------------------------

    def _resolve_up(self, pkt: PacketHeader) -> _PortFlow | None:
        e = self._e
        flow = e.up_flows.get(pkt.four_tuple())
        if flow is not None or pkt.kind != "syn":
            return flow
        reg = self.registry
        cls = classify(pkt, reg)
        if cls is PacketClass.OPSEC_BY_DST:
            # an Opsec client marks its SYN with pack_ts(p*, p_c); p_c may since
            # have been changed by a NAT, so only the p* half is checked
            mark_star, mark_c = unpack_ts(pkt.ts_val)
            lo, hi = reg.ephemeral
            if mark_star != pkt.dst_port or not lo <= mark_c <= hi:
                return None
            st = FlowPortState(p_c=pkt.src_port, p_star=pkt.dst_port, p_s=reg.listen_port(pkt.dst_port))
            try:
                st.p_hash = allocate_hash_port(pkt.src_addr, pkt.dst_addr, reg, e.in_use)
            except PortSetExhausted:
                self.stats.exhausted += 1
                return None
            first = True
        elif cls is PacketClass.OPSEC_BY_SRC:
            st = decode_ts_state(pkt, reg, pkt.ts_val)
            if st is None or pkt.dst_port != st.p_s:
                return None
            st.p_hash = pkt.src_port
            first = False
        else:
            return None
        flow = _PortFlow(st, first, pkt.src_addr, pkt.dst_addr)
        e.up_flows[pkt.four_tuple()] = flow
        if not first:
            e.in_use.add((pkt.src_addr, pkt.dst_addr, st.p_hash))
        e.down_flows[(pkt.dst_addr, pkt.src_addr, st.p_s, st.p_hash)] = flow
        e.down_flows[(pkt.dst_addr, pkt.src_addr, st.p_star, st.p_c)] = flow
        return flow

    def _resolve_down(self, pkt: PacketHeader) -> _PortFlow | None:
        e = self._e
        flow = e.down_flows.get(pkt.four_tuple())
        if flow is not None:
            return flow
        if classify(pkt, self.registry) is PacketClass.LEGACY:
            return None
        st = decode_ts_state(pkt, self.registry, pkt.ts_ecr)
        if st is None:
            return None
        if pkt.src_port == st.p_star:
            # already client-facing (restored nearer the server, or never
            # rewritten): keep the ports, the mark may predate a NAT
            st.p_c = pkt.dst_port
        st.p_hash = pkt.dst_port if pkt.dst_port in self.registry else None
        flow = _PortFlow(st, False, pkt.dst_addr, pkt.src_addr)
        e.down_flows[pkt.four_tuple()] = flow
        return flow

    def _close(self, flow: _PortFlow, pkt: PacketHeader) -> None:
        flow.fins += 1
        needed = 2 if self.coverage is Coverage.BOTH else 1
        if pkt.kind == "rst" or flow.fins >= needed:
            e = self._e
            st = flow.state
            for k in [k for k, v in e.up_flows.items() if v is flow]:
                del e.up_flows[k]
            for k in [k for k, v in e.down_flows.items() if v is flow]:
                del e.down_flows[k]
            if st.p_hash is not None:
                release_hash_port(flow.client_addr, flow.server_addr, st.p_hash, e.in_use)
            e.conn_session.pop(flow.conn, None)

    # -- upstream ------------------------------------------------------------

    def _process_up(self, pkt: PacketHeader) -> BoxOutput:
        flow = self._resolve_up(pkt)
        if flow is None:
            self.stats.passthrough += 1
            return BoxOutput(pkt, note="passthrough")
        try:
            out = rewrite_upstream(pkt, flow.state, flow.first, self.registry)
        except InconsistentState:
            self.stats.passthrough += 1
            return BoxOutput(pkt, note="inconsistent")
        self.stats.rewritten += 1
        if pkt.kind in ("fin", "rst"):
            self._close(flow, pkt)
            return BoxOutput(out)
        if pkt.kind != "data" or not self.coverage.up or not self.willing:
            return BoxOutput(out)
        path = parse_request_path(out.payload)
        if path is not None and (find_tokens(path) or self._pending(flow) is not None):
            return self.on_transit_request(out, flow)
        return self.on_data_packet(out, flow)

    def on_transit_request(self, pkt: PacketHeader, flow: _PortFlow) -> BoxOutput:
        path = parse_request_path(pkt.payload)
        env = envelope_from_path(path, self.path_budget)
        msgs = env.messages
        first = msgs[0] if msgs else None
        if first is not None and first.box_id == 0 and first.msg_type is MessageType.OPSEC_HELLO:
            sess = self._learn_session(msgs, flow)
            if sess is None:
                return BoxOutput(pkt)
            try:
                env = append_to_envelope(env, self._obhello_msg(sess, downstream=False))
                env = append_to_envelope(env, self._servann_msg(sess))
            except PathBudgetExceeded:
                self._abstain(sess, "path budget")
                return BoxOutput(pkt, note="abstain")
            self.stats.hellos += 1
            return BoxOutput(replace(pkt, payload=_swap_path(pkt.payload, path, env.origin_path)))
        if first is not None and first.box_id == 0 and first.msg_type is MessageType.SERV_REQ:
            sess = self._process_servreq(first, flow)
        else:
            # the round-2 request of a session announced on this connection,
            # damaged beyond recognition on the way
            sess = self._pending(flow)
            if sess is not None:
                self._nack(sess, path.encode(), "unreadable request")
        if sess is None or sess.ready_msg is None:
            return BoxOutput(pkt)
        if self.coverage.down:
            sess.ready_down_pending = True
            return BoxOutput(pkt)
        try:
            env = append_to_envelope(env, sess.ready_msg)
        except PathBudgetExceeded:
            self._abstain(sess, "path budget")
            return BoxOutput(pkt, note="abstain")
        self.stats.readies += 1
        return BoxOutput(replace(pkt, payload=_swap_path(pkt.payload, path, env.origin_path)))

    def _pending(self, flow: _PortFlow | None) -> _Session | None:
        """Session this box announced on ``flow``'s connection and still awaits a ServReq for."""
        if flow is None:
            return None
        sid = self._e.conn_session.get(flow.conn)
        s = self._e.sessions.get(sid) if sid else None
        if s is None or s.phase != "discovered" or s.ready_msg is not None:
            return None
        return s

    def _nack(self, sess: _Session, seen: bytes, why: str) -> None:
        # An ObReady over what actually arrived: the client's check fails and
        # it aborts, where silence would let a fail-open client carry on.
        sig = sign_transcript(self._e.keypair.private_part, sess.servdisc_raw, seen)
        sess.ready_msg = OpsecMessage(MessageType.OB_READY, self.box_id, pl.encode_obready(sig))
        sess.nacked = True
        self.audit.append(("nack", sess.sid.hex(), why))

    def _learn_session(self, msgs, flow: _PortFlow | None) -> _Session | None:
        if len(msgs) < 2 or msgs[1].msg_type is not MessageType.SERV_DISC or msgs[1].box_id != 0:
            return None
        try:
            pub, nonce = pl.decode_hello(msgs[0].payload)
            requested = pl.decode_servdisc(msgs[1].payload)
        except pl.PayloadError:
            return None
        sid = pl.session_id(pub, nonce)
        e = self._e
        if sid in e.abstained:
            return None
        sess = e.sessions.get(sid)
        if sess is None:
            sess = _Session(sid, nonce, fresh_nonce(self._rng), encode_message(msgs[1]), requested)
            e.sessions[sid] = sess
        if flow is not None:
            e.conn_session[flow.conn] = sid
            sess.client_addr, sess.server_addr, sess.p_star = flow.client_addr, flow.server_addr, flow.state.p_star
        return sess

    def _abstain(self, sess: _Session, why: str) -> None:
        self.stats.abstained += 1
        self.audit.append(("abstain", sess.sid.hex(), why))
        self._e.sessions.pop(sess.sid, None)
        self._e.abstained.add(sess.sid)

    def _obhello_msg(self, sess: _Session, downstream: bool) -> OpsecMessage:
        h = pl.ObHello(self._flags(downstream), self.public, sess.box_nonce, self.quote)
        return OpsecMessage(MessageType.OB_HELLO, self.box_id, pl.encode_obhello(h))

    def _servann_msg(self, sess: _Session) -> OpsecMessage:
        hashes = self.catalog_lookup([sfid for _, sfid in sess.requested])
        return OpsecMessage(MessageType.SERV_ANN, self.box_id, pl.encode_servann(hashes))

    def catalog_lookup(self, requested) -> list[bytes]:
        return [pl.announce_hash(s) for s in requested if s in self.catalog]

    def _process_servreq(self, msg: OpsecMessage, flow: _PortFlow | None) -> _Session | None:
        e = self._e
        try:
            req = pl.decode_servreq(msg.payload)
        except pl.PayloadError:
            req = None
        sess = e.sessions.get(req.session) if req is not None else None
        if sess is None:
            sess = self._pending(flow)
            if sess is not None:
                self._nack(sess, encode_message(msg), "unreadable ServReq")
            return sess
        if flow is not None:
            e.conn_session[flow.conn] = sess.sid
            sess.client_addr, sess.server_addr, sess.p_star = flow.client_addr, flow.server_addr, flow.state.p_star
        if sess.phase == "ready":
            return sess
        blob = req.secret_for(self.box_id)
        if blob is None:
            # not selected: keep nothing beyond the port state
            self.audit.append(("not_selected", sess.sid.hex()))
            e.sessions.pop(sess.sid, None)
            e.abstained.add(sess.sid)
            return None
        try:
            secret = pl.decode_box_secret(asym_open(e.keypair.private_part, blob))
        except (AuthenticationFailure, pl.PayloadError):
            self.stats.auth_failures += 1
            self.audit.append(("open_secret", sess.sid.hex(), False))
            self._nack(sess, encode_message(msg), "secret does not open")
            return sess
        self.audit.append(("open_secret", sess.sid.hex(), True))
        self._activate(sess, req, secret)
        sig = sign_transcript(e.keypair.private_part, sess.servdisc_raw, encode_message(msg))
        sess.ready_msg = OpsecMessage(MessageType.OB_READY, self.box_id, pl.encode_obready(sig))
        return sess

    def _activate(self, sess: _Session, req: pl.ServReq, secret: pl.BoxSecret) -> None:
        ch = HopChannel(secret.master_secret, sess.client_nonce, sess.box_nonce)
        sess.channel = ch
        f = secret.flags
        content_up = content_down = b""
        if secret.content_key:
            content_up, content_down = derive_content_keys(secret.content_key)
        if f & pl.SERVES_UP:
            sess.up_chain = [self.catalog[a.sfid] for a in req.assigned_to(self.box_id, pl.UP)
                             if a.sfid in self.catalog]
            sess.up_in = RecordReceiver(ch.key_up)
            if f & pl.HAS_NEXT_UP:
                sess.up_out = RecordSender(secret.next_up_key)
                sess.up_out_owner = secret.next_up_box
            elif content_up:
                sess.up_out = RecordSender(content_up)
                sess.up_out_tls = True
        if f & pl.SERVES_DOWN:
            sess.down_chain = [self.catalog[a.sfid] for a in req.assigned_to(self.box_id, pl.DOWN)
                               if a.sfid in self.catalog]
            sess.down_out = RecordSender(ch.key_down)
            if f & pl.HAS_PREV_DOWN:
                sess.down_in = RecordReceiver(secret.prev_down_key)
                sess.down_in_owner = secret.prev_down_box
            elif content_down:
                sess.down_in = RecordReceiver(content_down)
                sess.down_in_tls = True
        sess.alert_out = RecordSender(ch.alert_key)
        sess.phase = "ready"

    # -- downstream ----------------------------------------------------------

    def _process_down(self, pkt: PacketHeader) -> BoxOutput:
        flow = self._resolve_down(pkt)
        if flow is None:
            self.stats.passthrough += 1
            return BoxOutput(pkt, note="passthrough")
        out = rewrite_downstream(pkt, flow.state)
        self.stats.rewritten += 1
        if pkt.kind in ("fin", "rst"):
            self._close(flow, pkt)
            return BoxOutput(out)
        if pkt.kind != "data" or not self.coverage.down or not self.willing:
            return BoxOutput(out)
        resp = Response.from_bytes(out.payload)
        if resp is not None and self._handshake_response(resp, flow):
            return self.on_transit_response(out, resp, flow)
        return self.on_data_packet(out, flow)

    def _handshake_response(self, resp: Response, flow: _PortFlow) -> bool:
        if find_tokens(resp.text()):
            return True
        sid = self._e.conn_session.get(flow.conn)
        s = self._e.sessions.get(sid) if sid else None
        return s is not None and ((s.phase == "discovered" and not s.hello_down_sent) or s.ready_down_pending)

    def on_transit_response(self, pkt: PacketHeader, resp: Response, flow: _PortFlow) -> BoxOutput:
        e = self._e
        sess = None
        for msgs in _envelopes(resp.text()):
            first = msgs[0]
            if first.box_id != 0:
                continue
            if first.msg_type is MessageType.OPSEC_HELLO:
                sess = self._learn_session(msgs, flow)
            elif first.msg_type is MessageType.SERV_REQ:
                s = self._process_servreq(first, flow)
                if s is not None and s.ready_msg is not None and not s.ready_down_pending \
                        and (s.channel is not None or s.nacked) and not self.coverage.up:
                    s.ready_down_pending = True
                sess = s or sess
        if sess is None:
            sid = e.conn_session.get(flow.conn)
            sess = e.sessions.get(sid) if sid else None
        if sess is None:
            return BoxOutput(pkt)
        new_msgs = []
        if sess.phase == "discovered" and not sess.hello_down_sent:
            new_msgs = [self._obhello_msg(sess, downstream=True), self._servann_msg(sess)]
        elif sess.ready_down_pending and sess.ready_msg is not None:
            new_msgs = [sess.ready_msg]
        if not new_msgs:
            return BoxOutput(pkt)
        try:
            resp2 = _append_trailer(resp, new_msgs, self.path_budget)
        except PathBudgetExceeded:
            self._abstain(sess, "path budget")
            return BoxOutput(pkt, note="abstain")
        if new_msgs[0].msg_type is MessageType.OB_HELLO:
            sess.hello_down_sent = True
            self.stats.hellos += 1
        else:
            sess.ready_down_pending = False
            self.stats.readies += 1
        return BoxOutput(replace(pkt, payload=resp2.to_bytes()))

    # -- data phase ------------------------------------------------------------

    def _session_for(self, flow: _PortFlow, sid: bytes | None, direction: Direction) -> _Session | None:
        e = self._e
        if sid is not None:
            s = e.sessions.get(sid)
            if s is not None and s.phase == "ready":
                e.conn_session[flow.conn] = sid
                return s
            return None
        sid = e.conn_session.get(flow.conn)
        if sid is not None:
            s = e.sessions.get(sid)
            return s if s is not None and s.phase == "ready" else None
        if direction is Direction.DOWN:
            # a fresh connection seen only downstream: bind by (client, server, p*)
            # when exactly one ready session matches
            c, srv, ps = flow.client_addr, flow.server_addr, flow.state.p_star
            hits = [s for s in e.sessions.values()
                    if s.phase == "ready" and s.down_out is not None
                    and (s.client_addr, s.server_addr, s.p_star) == (c, srv, ps)]
            if len(hits) == 1:
                e.conn_session[flow.conn] = hits[0].sid
                return hits[0]
        return None

    def on_data_packet(self, pkt: PacketHeader, flow: _PortFlow) -> BoxOutput:
        rec = pl.parse_record(pkt.payload)
        up = pkt.direction is Direction.UP
        sess = self._session_for(flow, rec[0] if rec else None, pkt.direction)
        if sess is None:
            self.stats.passthrough += 1
            return BoxOutput(pkt, note="passthrough")
        if sess.terminated:
            self.stats.dropped += 1
            return BoxOutput(None, note="terminated")
        chain = sess.up_chain if up else sess.down_chain
        rx = sess.up_in if up else sess.down_in
        tx = sess.up_out if up else sess.down_out
        if (up and sess.up_in is None) or (not up and sess.down_out is None):
            return BoxOutput(pkt, note="not serving")
        # open
        if up:
            if rec is None or rec[1] != self.box_id:
                return BoxOutput(pkt, note="not addressed")
            sealed = rec[2]
        elif rec is not None:
            if rec[1] != sess.down_in_owner or rx is None or sess.down_in_tls:
                return BoxOutput(pkt, note="not addressed")
            sealed = rec[2]
        elif sess.down_in_tls:
            sealed = pl.parse_tls(pkt.payload)
            if sealed is None:
                return BoxOutput(pkt, note="not addressed")
        else:
            sealed = None
        try:
            plain = pkt.payload if sealed is None else rx.open(sealed)
        except (AuthenticationFailure, ReplayDetected) as exc:
            self.stats.auth_failures += 1
            self.audit.append(("open_record", sess.sid.hex(), False, type(exc).__name__))
            return BoxOutput(None, charged=True, note="auth failure")
        self.audit.append(("open_record", sess.sid.hex(), True))
        self.stats.records += 1
        ctx = FlowContext(pkt.direction, sess.sid, sess.up_index if up else sess.down_index)
        if up:
            sess.up_index += 1
        else:
            sess.down_index += 1
        alerts = []
        for sf in chain:
            v = sf.inspect(plain, ctx)
            if v.kind is VerdictKind.PASS:
                continue
            alerts.append(self._alert(sess, flow, sf, v))
            if v.kind is VerdictKind.TERMINATE:
                sess.terminated = True
                self.stats.dropped += 1
                return BoxOutput(None, alerts, charged=True, note="terminate")
        # re-seal for the next hop
        if up:
            if tx is None:
                payload = plain
            elif sess.up_out_tls:
                payload = pl.frame_tls(tx.seal(plain))
            else:
                payload = pl.frame_record(sess.sid, sess.up_out_owner, tx.seal(plain))
        else:
            payload = pl.frame_record(sess.sid, self.box_id, tx.seal(plain))
        return BoxOutput(replace(pkt, payload=payload), alerts, charged=True)

    def _alert(self, sess: _Session, flow: _PortFlow, sf: SecurityFunction, v: Verdict) -> PacketHeader:
        self.stats.alerts += 1
        body = pl.encode_alert_body(sf.id, v.kind, v.reason)
        st = flow.state
        return PacketHeader(flow.server_addr, flow.client_addr, st.p_star, st.p_c,
                            ts_ecr=pack_ts(st.p_star, st.p_c), direction=Direction.DOWN,
                            payload=pl.frame_alert(sess.sid, self.box_id, sess.alert_out.seal(body)),
                            kind="alert")


# -- helpers -------------------------------------------------------------------

def _swap_path(request: bytes, old_path: str, new_path: str) -> bytes:
    line, sep, rest = request.partition(b"\r\n")
    return line.replace(old_path.encode(), new_path.encode(), 1) + sep + rest


def _envelopes(text: str) -> list[list[OpsecMessage]]:
    out = []
    for tok in find_tokens(text):
        msgs = extract_from_path(tok)
        if msgs:
            out.append(msgs)
    return out


def trailer_token(resp: Response) -> str | None:
    """The body's trailing box-message token, if the last line is one."""
    lines = resp.body.rstrip("\n").split("\n")
    last = lines[-1] if lines else ""
    toks = find_tokens(last)
    if len(toks) == 1 and last == toks[0]:
        msgs = extract_from_path(last)
        if msgs and msgs[0].box_id != 0:
            return last
    return None


def _append_trailer(resp: Response, msgs, budget: int) -> Response:
    tok = trailer_token(resp)
    if tok is None:
        env = OpsecEnvelope((), "", budget)
        body = resp.body if resp.body.endswith("\n") or not resp.body else resp.body + "\n"
    else:
        env = envelope_from_path(tok, budget)
        body = resp.body.rstrip("\n")
        body = body[: len(body) - len(tok)]
    for m in msgs:
        env = append_to_envelope(env, m)
    return Response(resp.status, resp.reason, dict(resp.headers), body + env.origin_path + "\n")


def on_transit_request(box: BoxState, pkt: PacketHeader) -> PacketHeader | None:
    """Process one upstream packet at ``box``; returns the egress packet (None = dropped)."""
    return box.process(replace(pkt, direction=Direction.UP)).forward


def on_data_packet(box: BoxState, pkt: PacketHeader) -> BoxOutput:
    return box.process(pkt)


def catalog_lookup(box: BoxState, requested) -> list[bytes]:
    return box.catalog_lookup(requested)


def make_sf(spec: dict) -> SecurityFunction:
    """Build a toy SF from a scenario entry such as ``{"kind": "ids", "name": ..., ...}``."""
    kind = spec.get("kind", "ids")
    name = spec.get("name", kind)
    if kind == "ids":
        sigs = {}
        for s in spec.get("signatures", []):
            sigs[s["pattern"].encode()] = (VerdictKind[s.get("verdict", "ALERT").upper()], s.get("reason", ""))
        return KeywordIds(name=name, signatures=sigs, direction=spec.get("direction", "both"))
    if kind == "url-blocklist":
        return UrlBlocklist(name=name, blocked=tuple(spec.get("blocked", ())),
                            verdict=VerdictKind[spec.get("verdict", "TERMINATE").upper()])
    if kind == "byte-counter":
        return ByteCounter(name=name)
    raise ValueError(f"unknown security function kind {kind!r}")
