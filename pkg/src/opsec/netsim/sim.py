"""Client hosts, NAT, ISPs and the origin wired along one AS path.

Node 0 is the client side, then an optional NAT, the ISPs in upstream order
and finally the origin. Link ``i`` joins node ``i`` and ``i + 1``. Time is
an integer number of microseconds. Packets of one direction only visit the
ISPs covering that direction, but every link still costs its delay.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .. import client as cl
from .. import payloads as pl
from ..keys import (AttestationAuthority, BOX_CODE_HASH, RecordReceiver, RecordSender, AuthenticationFailure,
                    ReplayDetected, derive_content_keys, generate_keypair)
from ..obox import BoxState, Coverage, make_sf
from ..origin import ReflectionMode, Response, ServerProfile, format_request, handle_get, parse_request_path, sample_profile
from ..portplan import Direction, PacketClass, PacketHeader, classify, pack_ts
from ..scenario import ConfigInvalid, ScenarioConfig, parse_scenario
from .adversary import Adversary, AdversaryState, apply_adversary
from .events import EventLog, EventLoop
from .nat import NatState, nat_rewrite
from .scaling import InstanceQueue, ScaleController
from ..wire import MessageType, extract_from_path, find_tokens

log = logging.getLogger(__name__)

US = 1000  # microseconds per millisecond


# -- metrics ---------------------------------------------------------------------

@dataclass
class SessionMetrics:
    index: int
    kind: str                    # opsec | ports-only | legacy
    outcome: str = "pending"     # ready | aborted | terminated | completed | failed | pending
    abort_reason: str = ""
    handshake_rtt: Fraction | None = None   # from event times
    handshake_legs: Fraction | None = None  # from the logged message sequence
    rounds: int = 0
    reconnects: int = 0
    assignments: int = 0
    alerts: int = 0
    spoofed_alerts: int = 0
    app_bytes_sent: int = 0
    app_bytes_delivered: int = 0
    app_bytes_dropped: int = 0
    app_bytes_received: int = 0
    byte_identical: bool = True
    ts_transparent: bool = True
    fell_back: bool = False


@dataclass
class IspMetrics:
    isp_id: int
    instances_max: int = 1
    instance_history: list = field(default_factory=list)
    instance_flows: list = field(default_factory=list)
    passthrough: int = 0
    rewritten: int = 0
    exhausted: int = 0
    auth_failures: int = 0
    records: int = 0
    alerts: int = 0
    adversary_dropped: int = 0
    adversary_tampered: int = 0
    data_latency_us: list = field(default_factory=list)


@dataclass
class Metrics:
    sessions: list
    isps: list
    events: int
    duration_us: int
    rtt_us: int
    event_digest: str
    nat_drops: int = 0
    server_collisions: int = 0
    dropped_packets: int = 0


# -- nodes ----------------------------------------------------------------------

class _BoxPool:
    def __init__(self, box: BoxState, theta, cost_us: int):
        self.box = box
        self.ctl = ScaleController(theta)
        self.queues: list[InstanceQueue] = []
        self.cost = cost_us
        self.flow_inst: dict[int, int] = {}

    def process(self, pkt: PacketHeader, now: int):
        out = self.box.process(pkt)
        delay = 0
        # the controller pins flows by connection identity (trace)
        if out.charged:
            inst = self.flow_inst.get(pkt.trace)
            if inst is None:
                inst = self.ctl.add_flow(now)
                self.flow_inst[pkt.trace] = inst
            while len(self.queues) <= inst:
                self.queues.append(InstanceQueue(self.cost))
            delay = self.queues[inst].serve(now) - now
        if pkt.kind in ("fin", "rst") and pkt.trace in self.flow_inst:
            self.ctl.remove_flow(self.flow_inst.pop(pkt.trace), now)
        return out, delay


class _Isp:
    def __init__(self, sim, pos: int, spec, box: BoxState | None, adv: AdversaryState, cost_us: int):
        self.sim = sim
        self.pos = pos
        self.spec = spec
        self.name = f"isp{spec.isp_id}"
        self.coverage = Coverage(spec.coverage)
        self.pool = _BoxPool(box, spec.theta, cost_us) if box is not None else None
        self.adv = adv
        self.metrics = IspMetrics(spec.isp_id)

    def receive(self, pkt: PacketHeader) -> None:
        sim = self.sim
        up = pkt.direction is Direction.UP
        out, delay, alerts = pkt, 0, []
        covered = self.coverage.up if up else self.coverage.down
        if self.pool is not None and covered:
            if up:
                sim.obs_isp_up.append((self.pos, pkt.trace, pkt.src_port, pkt.dst_port, pkt.kind))
            if classify(pkt, sim.registry) is not PacketClass.LEGACY:
                res, delay = self.pool.process(pkt, sim.loop.now)
                out, alerts = res.forward, res.alerts
                if delay:
                    self.metrics.data_latency_us.append(delay)
        if out is not None and self.adv.kind is not Adversary.HONEST:
            out = apply_adversary(self.adv, out)
        for a in alerts:
            sim.transmit(replace(a, trace=pkt.trace), self.pos, delay)
        if out is None:
            sim.dropped(pkt, self.name)
            return
        sim.transmit(out, self.pos, delay)


class _Nat:
    def __init__(self, sim, pos: int, state: NatState):
        self.sim, self.pos, self.state, self.name = sim, pos, state, "nat"

    def receive(self, pkt: PacketHeader) -> None:
        if pkt.direction is Direction.DOWN:
            self.sim.obs_client_edge.append((pkt.trace, pkt.src_port, pkt.dst_port, pkt.kind))
        out = nat_rewrite(self.state, pkt)
        if out is None:
            self.sim.dropped(pkt, "nat")
            return
        if pkt.direction is Direction.UP:
            self.sim.wire_port[pkt.trace] = out.src_port
        self.sim.transmit(out, self.pos)


class _ClientSide:
    def __init__(self, sim):
        self.sim, self.pos, self.name = sim, 0, "clients"
        self.endpoints: dict[tuple, object] = {}

    def receive(self, pkt: PacketHeader) -> None:
        if not self.sim.nat_enabled:
            self.sim.obs_client_edge.append((pkt.trace, pkt.src_port, pkt.dst_port, pkt.kind))
        agent = self.endpoints.get((pkt.dst_addr, pkt.dst_port))
        if agent is None:
            self.sim.dropped(pkt, "no endpoint")
            return
        agent.on_packet(pkt)


@dataclass
class _ServerConn:
    trace: int
    fin_sent: bool = False


class _Origin:
    def __init__(self, sim, pos: int, profile: ServerProfile, address: str, extra_ports):
        self.sim, self.pos, self.name = sim, pos, "origin"
        self.profile = profile
        self.addr = address
        self.ports = {profile.listen_port, *extra_ports}
        self.conns: dict[tuple, _ServerConn] = {}
        self.clock = 1_000_000
        self.tls: list[tuple] = []  # (rx, tx) per content key handed over at Ready
        self.received: dict[int, list] = {}
        self.sent: dict[int, list] = {}

    def _reply(self, pkt: PacketHeader, kind: str, payload: bytes = b"") -> None:
        out = PacketHeader(self.addr, pkt.src_addr, pkt.dst_port, pkt.src_port,
                           ts_val=self.clock + self.sim.loop.now // US, ts_ecr=pkt.ts_val,
                           direction=Direction.DOWN, payload=payload, kind=kind, trace=pkt.trace)
        if kind == "data":
            self.sent.setdefault(pkt.trace, []).append(payload)
        self.sim.transmit(out, self.pos)

    def add_content_key(self, key: bytes) -> None:
        up, down = derive_content_keys(key)
        self.tls.append((RecordReceiver(up), RecordSender(down)))

    def receive(self, pkt: PacketHeader) -> None:
        sim = self.sim
        sim.obs_server.append((pkt.trace, pkt.src_addr, pkt.dst_addr, pkt.src_port, pkt.dst_port, pkt.kind,
                               pkt.ts_val))
        key = (pkt.src_addr, pkt.src_port, pkt.dst_port)
        if pkt.kind == "syn":
            if pkt.dst_port not in self.ports:
                self._reply(pkt, "rst")
                return
            if key in self.conns:
                sim.server_collisions += 1
                self._reply(pkt, "rst")
                return
            self.conns[key] = _ServerConn(pkt.trace)
            self._reply(pkt, "synack")
            return
        conn = self.conns.get(key)
        if conn is None:
            if pkt.kind not in ("rst", "fin"):
                self._reply(pkt, "rst")
            return
        if pkt.kind == "fin":
            if not conn.fin_sent:
                self._reply(pkt, "fin")
            del self.conns[key]
            return
        if pkt.kind == "rst":
            del self.conns[key]
            return
        if pkt.kind != "data" or conn.fin_sent:
            return
        payload, tx = pkt.payload, None
        sealed = pl.parse_tls(payload)
        if sealed is not None:
            for rx, t in self.tls:
                try:
                    payload = rx.open(sealed)
                    tx = t
                    break
                except (AuthenticationFailure, ReplayDetected):
                    continue
        self.received.setdefault(pkt.trace, []).append(payload)
        sim.delivered(pkt.trace, len(payload))
        path = parse_request_path(payload)
        if path is None:
            resp, close = Response(400, "Bad Request", {}, ""), self.profile.close_after_response
        else:
            resp, _ecr, close = handle_get(self.profile, path, pkt.ts_val)
        if close:
            resp.headers["Connection"] = "close"
        body = resp.to_bytes()
        self._reply(pkt, "data", pl.frame_tls(tx.seal(body)) if tx is not None else body)
        if close:
            conn.fin_sent = True
            self._reply(pkt, "fin")


# -- client agents --------------------------------------------------------------

@dataclass
class _Conn:
    trace: int
    local_port: int
    remote_port: int
    ts_val: int
    state: str = "syn_sent"  # syn_sent | open | closing | closed
    purpose: str = ""


class _Agent:
    """Drives one client session over as many TCP connections as it needs."""

    def __init__(self, sim, index: int, addr: str, kind: str, rng):
        self.sim, self.index, self.addr, self.kind, self.rng = sim, index, addr, kind, rng
        self.m = SessionMetrics(index, kind)
        self.session: cl.ClientSession | None = None
        self.conn: _Conn | None = None
        self.used_ports: set = set()
        self.phase = "idle"  # idle | hs1 | hs2 | data | done
        self.t_start = 0
        self.legs = 0
        self.requests: list[bytes] = []
        self.outstanding = 0
        self.watch = 0
        self.resp_expected: list[bytes] = []

    # -- plumbing
    def _port(self) -> int:
        lo, hi = self.sim.cfg.ephemeral
        while True:
            p = int(self.rng.integers(lo, hi + 1))
            if p not in self.used_ports:
                self.used_ports.add(p)
                return p

    def _leg(self, what: str) -> None:
        self.legs += 1
        self.sim.log.add(self.sim.loop.now, "leg", session=self.index, leg=what)

    def _send(self, kind: str, payload: bytes = b"", conn: _Conn | None = None) -> None:
        c = conn or self.conn
        pkt = PacketHeader(self.addr, self.sim.origin_addr, c.local_port, c.remote_port, ts_val=c.ts_val,
                           direction=Direction.UP, payload=payload, kind=kind, trace=c.trace)
        self.sim.transmit(pkt, 0)

    def _open(self, remote_port: int, opsec: bool, purpose: str, local_port: int | None = None) -> _Conn:
        lp = local_port or self._port()
        if opsec:
            ts = pack_ts(remote_port, lp)
        else:
            ts = int(self.rng.integers(1, 2 ** 32))
        c = _Conn(self.sim.new_trace(self, opsec, remote_port), lp, remote_port, ts, purpose=purpose)
        self.sim.client_side.endpoints[(self.addr, lp)] = self
        self.conn = c
        self._send("syn", conn=c)
        self._arm()
        return c

    def _arm(self) -> None:
        self.watch += 1
        self.sim.loop.after(self.sim.timeout_us, self._timeout, self.watch)

    def _timeout(self, token: int) -> None:
        if token != self.watch or self.phase in ("done",):
            return
        self.sim.log.add(self.sim.loop.now, "timeout", session=self.index, phase=self.phase)
        if self.phase in ("hs1", "hs2", "probe"):
            self._handshake_failed()
        else:
            self.m.app_bytes_dropped += self.outstanding
            self.outstanding = 0
            self._finish("failed")

    # -- lifecycle
    def start(self) -> None:
        raise NotImplementedError

    def on_packet(self, pkt: PacketHeader) -> None:
        c = self.conn
        if pkt.kind == "alert":
            self.on_alert(pkt)
            return
        if c is None or pkt.trace != c.trace:
            if pkt.kind == "fin":
                self._send_for_trace(pkt, "fin")
            return
        if pkt.kind == "synack" and c.state == "syn_sent":
            self._on_synack(c)
        elif pkt.kind == "rst":
            c.state = "closed"
            self._on_refused()
        elif pkt.kind == "data":
            self._on_data(pkt)
        elif pkt.kind == "fin":
            # passive close answers with its own FIN; the active closer's
            # final ACK is not modelled
            if c.state == "open":
                self._send("fin")
            c.state = "closed"

    def _send_for_trace(self, pkt: PacketHeader, kind: str) -> None:
        out = PacketHeader(self.addr, self.sim.origin_addr, pkt.dst_port, pkt.src_port, direction=Direction.UP,
                           kind=kind, trace=pkt.trace)
        self.sim.transmit(out, 0)

    def _on_synack(self, c: _Conn) -> None:
        self._send("ack")
        c.state = "open"
        handshake = self.phase in ("hs1", "hs2", "probe")
        if handshake:
            self._leg("synack")
            self._leg("ack")
            # the request follows once the ACK leg has been paid for
            self.sim.loop.after(self.sim.rtt_us // 2, self._established, c.trace)
        else:
            self._established(c.trace)

    def _established(self, trace: int) -> None:
        if self.conn is None or self.conn.trace != trace or self.conn.state != "open":
            return
        self.on_established()

    def _close(self) -> None:
        if self.conn is not None and self.conn.state == "open":
            self._send("fin")
            self.conn.state = "closing"

    def _finish(self, outcome: str) -> None:
        if self.phase == "done":
            return
        self.phase = "done"
        if self.m.outcome in ("pending", "ready"):
            self.m.outcome = outcome
        self._close()

    def _handshake_failed(self) -> None:
        self._finish("failed")

    def _on_refused(self) -> None:
        self._handshake_failed()

    def on_alert(self, pkt: PacketHeader) -> None:
        self.m.spoofed_alerts += 1

    # -- data phase shared by all kinds
    def _plaintext_request(self, path: str, body: str = "") -> bytes:
        return format_request(path, self.sim.profile.host) + body.encode()

    def _data_conn_ok(self) -> bool:
        return self.conn is not None and self.conn.state == "open" and self.conn.purpose == "data"

    def _begin_data(self) -> None:
        t = self.sim.cfg.traffic
        self.requests = [self._plaintext_request(p) for p in t.requests]
        self.requests += [self._plaintext_request("/upload", b) for b in t.bodies]
        self.phase = "data"
        self._next_request()

    def _data_target(self) -> tuple[int, bool]:
        raise NotImplementedError

    def _next_request(self) -> None:
        if self.phase != "data":
            return
        if not self.requests:
            self._finish("completed" if self.kind != "opsec" else self.m.outcome if self.m.outcome != "pending" else "completed")
            return
        if not self._data_conn_ok():
            port, opsec = self._data_target()
            self._open(port, opsec, "data")
            return
        self._send_request(self.requests.pop(0))

    def on_established(self) -> None:
        if self.phase == "data":
            self._send_request(self.requests.pop(0))

    def _send_request(self, plaintext: bytes) -> None:
        self.outstanding = len(plaintext)
        self.m.app_bytes_sent += len(plaintext)
        self.sim.sent_plain.setdefault(self.conn.trace, []).append(plaintext)
        self._send("data", self._wrap(plaintext))
        self._arm()

    def _wrap(self, plaintext: bytes) -> bytes:
        return plaintext

    def _unwrap(self, payload: bytes) -> bytes | None:
        return payload

    def _on_data(self, pkt: PacketHeader) -> None:
        if self.phase != "data":
            self.on_handshake_data(pkt)
            return
        plain = self._unwrap(pkt.payload)
        self.outstanding = 0
        if plain is None:
            self.m.byte_identical = False
        else:
            self.m.app_bytes_received += len(plain)
            self.sim.recv_plain.setdefault(pkt.trace, []).append(plain)
        resp = Response.from_bytes(plain or b"")
        if resp is not None and resp.headers.get("Connection") == "close":
            self.conn.state = "closing"
        self.watch += 1
        self._next_request()

    def on_handshake_data(self, pkt: PacketHeader) -> None:
        pass

    def upstream_dropped(self) -> None:
        if self.outstanding:
            self.m.app_bytes_dropped += self.outstanding
            self.outstanding = 0


class LegacyAgent(_Agent):
    """A non-Opsec client, possibly on ports that collide with the Opsec set."""

    def __init__(self, sim, index, addr, rng, src_port: int | None, dst_port: int):
        super().__init__(sim, index, addr, "legacy", rng)
        self.src_port, self.dst_port = src_port, dst_port

    def start(self) -> None:
        self.t_start = self.sim.loop.now
        self.phase = "data"
        t = self.sim.cfg.traffic
        self.requests = [self._plaintext_request(p) for p in t.requests]
        if self.src_port is not None:
            self.used_ports.add(self.src_port)
        self._open(self.dst_port, False, "data", local_port=self.src_port)

    def _data_target(self):
        return self.dst_port, False

    def _on_refused(self) -> None:
        self._finish("failed")


class PortsOnlyAgent(_Agent):
    """Uses p* and the timestamp marking but skips the handshake (port-plan tests)."""

    def __init__(self, sim, index, addr, rng):
        super().__init__(sim, index, addr, "ports-only", rng)
        reg = sim.registry
        eligible = reg.ports_for(sim.profile.listen_port)
        self.p_star = int(eligible[int(rng.integers(len(eligible)))])
        self.fallback = False

    def start(self) -> None:
        self.t_start = self.sim.loop.now
        t = self.sim.cfg.traffic
        self.requests = [self._plaintext_request(p) for p in t.requests]
        self.phase = "data"
        self._open(self.p_star, True, "data")

    def _data_target(self):
        if self.fallback:
            return self.sim.profile.listen_port, False
        return self.p_star, True

    def _on_refused(self) -> None:
        if self.fallback:
            self._finish("failed")
            return
        self.fallback = self.m.fell_back = True
        self.conn = None
        self._next_request()

    def _handshake_failed(self) -> None:
        self._on_refused()


class OpsecAgent(_Agent):
    def __init__(self, sim, index, addr, rng):
        super().__init__(sim, index, addr, "opsec", rng)
        self.pending_get: cl.GetRequest | None = None

    def start(self) -> None:
        sim = self.sim
        c = sim.cfg.client
        policy = cl.SessionPolicy(fail_mode=cl.FailMode(c.fail_mode), path_budget=c.path_budget)
        sfc = cl.SfcSpec(tuple(sim.sf_ids[n] for n in c.sfc_up), tuple(sim.sf_ids[n] for n in c.sfc_down))
        target = cl.Target(sim.origin_addr, sim.profile.listen_port, sim.profile.host, sim.profile.tls_like)
        p_c = self._port()
        s, req = cl.begin_session(target, sfc, policy, self.rng, sim.registry, p_c, sim.authority.public, self.addr)
        self.session = s
        self.t_start = sim.loop.now
        sim.log.add(sim.loop.now, "session_start", session=self.index, state=s.state.value)
        if s.state is cl.SessionState.ABORTED:
            self._aborted()
            return
        if s.state is cl.SessionState.READY:
            self._ready()
            return
        self.pending_get = req
        self.phase = "hs1"
        self._leg("syn")
        self._open(s.ports.p_star, True, "hs", local_port=p_c)

    def on_established(self) -> None:
        if self.phase in ("hs1", "hs2") and self.pending_get is not None:
            get = self.pending_get
            self.pending_get = None
            self._leg(f"get{self.session.rounds}")
            self.sim.log.add(self.sim.loop.now, "round", session=self.index, n=self.session.rounds)
            self._send("data", get.payload)
            self._arm()
            return
        super().on_established()

    def on_handshake_data(self, pkt: PacketHeader) -> None:
        s = self.session
        self._leg(f"response{s.rounds}")
        self.watch += 1
        resp = Response.from_bytes(pkt.payload)
        closing = resp is not None and resp.headers.get("Connection") == "close"
        if closing:
            self.conn.state = "closing"
        if self.phase == "hs1":
            s, get = cl.on_response_1(s, pkt.payload, self.rng)
        else:
            s = cl.on_response_2(s, pkt.payload)
            get = None
        self.sim.log.add(self.sim.loop.now, "client_state", session=self.index, state=s.state.value)
        if s.state is cl.SessionState.ABORTED:
            self._aborted()
        elif s.state is cl.SessionState.READY:
            self._ready()
        elif get is not None:
            self.phase = "hs2"
            if closing:
                # worst case: the server closed, reconnect before round 2
                self.m.reconnects += 1
                p_c = self._port()
                s.ports.p_c = p_c
                get = replace(get, ts_val=pack_ts(s.ports.p_star, p_c))
                self.pending_get = get
                self._leg("syn")
                self._open(s.ports.p_star, True, "hs", local_port=p_c)
            else:
                self.pending_get = get
                self.on_established()

    def _ready(self) -> None:
        s = self.session
        now = self.sim.loop.now
        self.m.outcome = "ready"
        self.m.rounds = s.rounds
        self.m.assignments = len(s.assignments)
        self.m.handshake_rtt = Fraction(now - self.t_start, self.sim.rtt_us)
        self.m.handshake_legs = Fraction(self.legs, 2)
        self.sim.log.add(now, "ready", session=self.index, legs=self.legs, assignments=len(s.assignments))
        if s.content_key:
            self.sim.origin.add_content_key(s.content_key)
        if self.conn is not None and self.conn.state == "open":
            self.conn.purpose = "data" if s.opsec_ports else "hs"
        self._begin_data()

    def _aborted(self) -> None:
        s = self.session
        self.m.outcome = "aborted"
        self.m.abort_reason = s.abort_reason.value if s.abort_reason else ""
        self.sim.log.add(self.sim.loop.now, "aborted", session=self.index, reason=self.m.abort_reason)
        self._finish("aborted")

    def _handshake_failed(self) -> None:
        s = self.session
        if s.state not in (cl.SessionState.AWAIT_RESPONSE_1, cl.SessionState.AWAIT_RESPONSE_2):
            self._finish("failed")
            return
        self.m.fell_back = True
        self.conn = None
        cl.fallback_legacy(s)
        if s.state is cl.SessionState.ABORTED:
            self._aborted()
        else:
            self._ready()

    def _on_refused(self) -> None:
        if self.phase in ("hs1", "hs2"):
            self._handshake_failed()
        else:
            self._finish("failed")

    def _data_target(self):
        s = self.session
        if s.opsec_ports:
            return s.ports.p_star, True
        return s.target.p_s, False

    def _open(self, remote_port, opsec, purpose, local_port=None):
        c = super()._open(remote_port, opsec, purpose, local_port)
        if self.session is not None and self.session.ports is not None and opsec:
            self.session.ports.p_c = c.local_port
        return c

    def _wrap(self, plaintext: bytes) -> bytes:
        return cl.seal_app_data(self.session, plaintext)

    def _unwrap(self, payload: bytes) -> bytes | None:
        return cl.recv_app_data(self.session, payload)

    def _send_request(self, plaintext: bytes) -> None:
        if self.session.state is not cl.SessionState.READY:
            self._finish(self.m.outcome)
            return
        super()._send_request(plaintext)

    def on_alert(self, pkt: PacketHeader) -> None:
        s = self.session
        if s is None:
            self.m.spoofed_alerts += 1
            return
        before = s.spoofed_alerts
        note = cl.on_alert(s, pkt.payload)
        self.m.spoofed_alerts += s.spoofed_alerts - before
        if note is None:
            return
        self.m.alerts += 1
        self.sim.log.add(self.sim.loop.now, "alert", session=self.index, box=note.box_id,
                         verdict=note.verdict.name, reason=note.reason)
        if s.state is cl.SessionState.TERMINATED:
            self.m.outcome = "terminated"
            self.upstream_dropped()
            self._finish("terminated")


# -- simulation --------------------------------------------------------------------

class Simulation:
    def __init__(self, cfg: ScenarioConfig, keep_events: bool = False):
        self.cfg = cfg
        self.registry = cfg.registry()
        _check_coverage(cfg)
        root = np.random.SeedSequence(cfg.seed)
        (s_auth, s_box, s_nat, s_client, s_origin, s_adv) = root.spawn(6)
        self.loop = EventLoop()
        self.log = EventLog(keep_events)
        self.nat_enabled = cfg.path.nat
        delays = [int(round(d * US)) for d in cfg.path.link_delays_ms()]
        self.delays = delays
        self.rtt_us = 2 * sum(delays)
        self.timeout_us = max(1_000_000, 3 * self.rtt_us)
        self.authority = AttestationAuthority(np.random.default_rng(s_auth))
        self.sfs = {s.name: make_sf(s.model_dump()) for s in cfg.security_functions}
        self.sf_ids = {n: sf.id for n, sf in self.sfs.items()}
        o = cfg.origin
        rng_o = np.random.default_rng(s_origin)
        prof_kw = dict(close_after_response=o.close_after_response, listen_port=o.listen_port,
                       tls_like=o.tls_like, host=o.host)
        if o.mix is not None:
            self.profile = sample_profile(o.mix, rng_o, **prof_kw)
        else:
            self.profile = ServerProfile(reflection_mode=ReflectionMode(o.reflection_mode or "redirect"), **prof_kw)
        self.origin_addr = o.address
        # nodes
        self.client_side = _ClientSide(self)
        self.nodes = [self.client_side]
        if cfg.path.nat:
            self.nat = NatState(rng=np.random.default_rng(s_nat), port_range=tuple(cfg.ephemeral))
            self.nodes.append(_Nat(self, len(self.nodes), self.nat))
        else:
            self.nat = None
        cost_us = max(1, int(round(cfg.queue.c_p_ms * US)))
        box_seqs = s_box.spawn(len(cfg.path.isps))
        adv_seqs = s_adv.spawn(len(cfg.path.isps))
        self.isps: list[_Isp] = []
        for spec, bs, as_ in zip(cfg.path.isps, box_seqs, adv_seqs):
            rng_b = np.random.default_rng(bs)
            box = None
            if spec.opsec:
                kp = generate_keypair(rng_b)
                box_id = spec.isp_id
                self.authority.register(box_id, BOX_CODE_HASH)
                quote = self.authority.issue_quote(box_id, BOX_CODE_HASH, kp.public_part)
                box = BoxState(box_id, kp, quote, [self.sfs[n] for n in spec.catalog], self.registry, rng_b,
                               Coverage(spec.coverage), cfg.client.path_budget, spec.willing)
            rng_a = np.random.default_rng(as_)
            adv = AdversaryState(Adversary(spec.adversary), self.registry, rng_a, own_box_id=spec.isp_id,
                                 own_keys=generate_keypair(rng_a), target=spec.tamper.target, mode=spec.tamper.mode)
            isp = _Isp(self, len(self.nodes), spec, box, adv, cost_us)
            self.isps.append(isp)
            self.nodes.append(isp)
        self.origin = _Origin(self, len(self.nodes), self.profile, o.address, o.extra_ports)
        self.nodes.append(self.origin)
        # bookkeeping
        self._trace = 0
        self.trace_owner: dict[int, _Agent] = {}
        self.trace_info: dict[int, tuple] = {}
        self.wire_port: dict[int, int] = {}
        self.obs_server: list = []
        self.obs_client_edge: list = []
        self.obs_isp_up: list = []
        self.sent_plain: dict[int, list] = {}
        self.recv_plain: dict[int, list] = {}
        self.server_collisions = 0
        self.drops = 0
        self.agents: list[_Agent] = []
        self._make_agents(np.random.default_rng(s_client))

    def _make_agents(self, rng) -> None:
        t = self.cfg.traffic
        n_total = t.sessions + t.legacy_flows
        spread = int(round(t.start_spread_ms * US))
        seqs = np.random.SeedSequence(int(rng.integers(2 ** 63))).spawn(max(n_total, 1))
        for k in range(n_total):
            addr = (f"10.{k // 62500}.{(k // 250) % 250}.{k % 250 + 1}" if self.nat_enabled
                    else f"198.{51 + k // 62500}.{(k // 250) % 250}.{k % 250 + 1}")
            r = np.random.default_rng(seqs[k])
            if k < t.sessions:
                agent = OpsecAgent(self, k, addr, r) if t.mode == "opsec" else PortsOnlyAgent(self, k, addr, r)
            else:
                agent = self._legacy_agent(k, addr, r)
            self.agents.append(agent)
            start = int(rng.integers(0, spread + 1)) if spread else 0
            self.loop.at(start, agent.start)

    def _legacy_agent(self, k, addr, r) -> LegacyAgent:
        t = self.cfg.traffic
        ports = self.registry.ports
        dst_choices = [p for p in self.cfg.origin.extra_ports if p in self.registry]
        choice = t.legacy_port_choice
        if choice == "mixed":
            choice = "src" if (r.integers(2) == 0 or not dst_choices) else "dst"
        if choice == "dst" and dst_choices:
            return LegacyAgent(self, k, addr, r, None, int(dst_choices[int(r.integers(len(dst_choices)))]))
        return LegacyAgent(self, k, addr, r, int(ports[int(r.integers(len(ports)))]), self.profile.listen_port)

    # -- packet movement
    def new_trace(self, agent, opsec: bool, remote_port: int) -> int:
        self._trace += 1
        self.trace_owner[self._trace] = agent
        self.trace_info[self._trace] = (agent.index, opsec, remote_port)
        return self._trace

    def transmit(self, pkt: PacketHeader, from_pos: int, extra: int = 0) -> None:
        if pkt.direction is Direction.UP:
            to = from_pos + 1
            d = self.delays[from_pos]
        else:
            to = from_pos - 1
            d = self.delays[to]
        self.loop.after(d + extra, self._arrive, to, pkt)

    def _arrive(self, pos: int, pkt: PacketHeader) -> None:
        node = self.nodes[pos]
        self.log.add(self.loop.now, "pkt", at=node.name, dir=pkt.direction.value, kind=pkt.kind,
                     src=f"{pkt.src_addr}:{pkt.src_port}", dst=f"{pkt.dst_addr}:{pkt.dst_port}",
                     ts=f"{pkt.ts_val}/{pkt.ts_ecr}", n=len(pkt.payload), conn=pkt.trace,
                     msgs=opsec_messages(pkt) if pkt.kind == "data" else "")
        node.receive(pkt)

    def dropped(self, pkt: PacketHeader, where: str) -> None:
        self.drops += 1
        self.log.add(self.loop.now, "drop", at=where, kind=pkt.kind, conn=pkt.trace)
        if pkt.direction is Direction.UP and pkt.kind == "data":
            agent = self.trace_owner.get(pkt.trace)
            if agent is not None:
                agent.upstream_dropped()

    def delivered(self, trace: int, n: int) -> None:
        agent = self.trace_owner.get(trace)
        if agent is not None and agent.phase == "data":
            agent.m.app_bytes_delivered += n
            agent.outstanding = 0

    # -- run
    def run(self, until_ms: float | None = None) -> Metrics:
        until = None if until_ms is None else int(round(until_ms * US))
        self.loop.run(until)
        self._finalize()
        return self.metrics()

    def _finalize(self) -> None:
        for a in self.agents:
            if a.kind == "legacy" or a.kind == "ports-only":
                sent = [p for tr, ps in self.sent_plain.items() if self.trace_owner[tr] is a for p in ps]
                got = [p for tr, ps in self.origin.received.items() if self.trace_owner.get(tr) is a for p in ps]
                resp_sent = [p for tr, ps in self.origin.sent.items() if self.trace_owner.get(tr) is a for p in ps]
                resp_got = [p for tr, ps in self.recv_plain.items() if self.trace_owner[tr] is a for p in ps]
                a.m.byte_identical = a.m.byte_identical and sent == got and resp_sent == resp_got
            if a.kind == "legacy":
                for tr, (idx, _o, _p) in self.trace_info.items():
                    if idx != a.index:
                        continue
                    syn_ts = [o[6] for o in self.obs_server if o[0] == tr and o[5] == "syn"]
                    if syn_ts and self._conn_ts(a, tr) is not None and syn_ts[0] != self._conn_ts(a, tr):
                        a.m.ts_transparent = False

    def _conn_ts(self, agent, trace):
        c = agent.conn
        return c.ts_val if c is not None and c.trace == trace else None

    def metrics(self) -> Metrics:
        isps = []
        for isp in self.isps:
            m = isp.metrics
            if isp.pool is not None:
                st = isp.pool.box.stats
                m.passthrough, m.rewritten, m.exhausted = st.passthrough, st.rewritten, st.exhausted
                m.auth_failures, m.records, m.alerts = st.auth_failures, st.records, st.alerts
                m.instance_history = list(isp.pool.ctl.history)
                m.instances_max = max([1] + [n for _, n in m.instance_history])
                m.instance_flows = [q.served for q in isp.pool.queues]
            m.adversary_dropped, m.adversary_tampered = isp.adv.dropped, isp.adv.tampered
            isps.append(m)
        return Metrics([a.m for a in self.agents], isps, self.log.count, self.loop.now, self.rtt_us,
                       self.log.digest(), self.nat.drops if self.nat else 0, self.server_collisions, self.drops)


MESSAGE_NAMES = {MessageType.OPSEC_HELLO: "OpsecHello", MessageType.SERV_DISC: "ServDisc",
                 MessageType.OB_HELLO: "ObHello", MessageType.SERV_ANN: "ServAnn",
                 MessageType.SERV_REQ: "ServReq", MessageType.OB_READY: "ObReady"}


def opsec_messages(pkt: PacketHeader) -> str:
    """Opsec messages carried by a request path or a response, e.g. ``ServDisc,ObHello@1``."""
    path = parse_request_path(pkt.payload)
    if path is not None:
        texts = [path]
    else:
        resp = Response.from_bytes(pkt.payload)
        if resp is None:
            return ""
        texts = list(resp.headers.values()) + [resp.body]
    seen = []
    for text in texts:
        for tok in find_tokens(text):
            for m in extract_from_path(tok):
                name = MESSAGE_NAMES[m.msg_type] + (f"@{m.box_id}" if m.box_id else "")
                if name not in seen:
                    seen.append(name)
    return ",".join(seen)


def _check_coverage(cfg: ScenarioConfig) -> None:
    opsec = [i for i in cfg.path.isps if i.opsec]
    up = any(i.coverage in ("up", "both") for i in opsec)
    down = any(i.coverage in ("down", "both") for i in opsec)
    if up and not down:
        raise ConfigInvalid("path.isps: an Opsec ISP on the upstream path needs one on the downstream "
                            "path to restore client ports")


def build(config) -> Simulation:
    """Build from a ScenarioConfig or a plain dict (validated)."""
    cfg = config if isinstance(config, ScenarioConfig) else parse_scenario(config)
    return Simulation(cfg)


def run(sim: Simulation, until_ms: float | None = None) -> Metrics:
    return sim.run(until_ms)
