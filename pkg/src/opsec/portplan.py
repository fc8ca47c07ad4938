"""Opsec port set, per-flow port identities and header rewriting.

Four ports describe one Opsec flow:

* ``p_c``    client source port as seen on the wire (after any NAT)
* ``p_star`` Opsec destination port chosen by the client, member of the set P
* ``p_hash`` source port in P assigned by the first Opsec ISP
* ``p_s``    the server's real listening port, ``registry[p_star]``

Legacy edge routers only look at ports: a packet whose destination port is
in P is Opsec (first ISP), otherwise one whose source port is in P is Opsec
(later ISPs, or the return direction), otherwise it is legacy.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping

DEFAULT_REGISTRY = {7443: 443, 8443: 443, 7080: 80, 8080: 80}
DEFAULT_EPHEMERAL = (49152, 65535)


class PortPlanError(Exception):
    pass


class PortSetExhausted(PortPlanError):
    pass


class InconsistentState(PortPlanError):
    pass


class UnknownFlow(PortPlanError):
    pass


class PacketClass(enum.Enum):
    OPSEC_BY_DST = "opsec_by_dst"
    OPSEC_BY_SRC = "opsec_by_src"
    LEGACY = "legacy"


class Direction(enum.Enum):
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class PortRegistry:
    mapping: Mapping[int, int]
    ephemeral: tuple[int, int] = DEFAULT_EPHEMERAL
    service_ports: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "mapping", dict(sorted(self.mapping.items())))
        for p, ps in self.mapping.items():
            if not (1 <= p <= 65535 and 1 <= ps <= 65535):
                raise PortPlanError(f"port out of range in registry: {p}->{ps}")
        problems = self.validate()
        if problems:
            raise PortPlanError("; ".join(problems))

    def validate(self) -> list[str]:
        lo, hi = self.ephemeral
        out = []
        for p in self.mapping:
            if lo <= p <= hi:
                out.append(f"opsec port {p} lies in the ephemeral range {lo}-{hi}")
            if p in self.service_ports or p in self.mapping.values():
                out.append(f"opsec port {p} collides with a service port in use")
        return out

    @property
    def ports(self) -> tuple[int, ...]:
        return tuple(self.mapping)

    def __contains__(self, port: int) -> bool:
        return port in self.mapping

    def listen_port(self, p_star: int) -> int:
        return self.mapping[p_star]

    def ports_for(self, p_s: int) -> tuple[int, ...]:
        return tuple(p for p, s in self.mapping.items() if s == p_s)

    @classmethod
    def default(cls) -> "PortRegistry":
        return cls(DEFAULT_REGISTRY)

    @classmethod
    def from_pairs(cls, pairs, **kw) -> "PortRegistry":
        return cls({int(a): int(b) for a, b in pairs}, **kw)


@dataclass
class FlowPortState:
    p_c: int
    p_star: int
    p_s: int
    p_hash: int | None = None

    def check(self, reg: PortRegistry) -> None:
        if self.p_star not in reg or reg.listen_port(self.p_star) != self.p_s:
            raise InconsistentState(f"p*={self.p_star} does not map to p_s={self.p_s}")
        if self.p_hash is not None and self.p_hash not in reg:
            raise InconsistentState(f"p#={self.p_hash} is not an Opsec port")


@dataclass(frozen=True)
class PacketHeader:
    src_addr: str
    dst_addr: str
    src_port: int
    dst_port: int
    ts_val: int = 0
    ts_ecr: int = 0
    direction: Direction = Direction.UP
    payload: bytes = b""
    kind: str = "data"  # syn | synack | ack | data | fin | rst | alert
    # simulator bookkeeping; network elements never branch on it
    trace: int = field(default=0, compare=False)

    def __post_init__(self):
        for p in (self.src_port, self.dst_port):
            if not 1 <= p <= 65535:
                raise ValueError(f"port out of range: {p}")

    def four_tuple(self) -> tuple[str, str, int, int]:
        return (self.src_addr, self.dst_addr, self.src_port, self.dst_port)

    def wire_bytes(self) -> bytes:
        """Canonical byte image, used for byte-identity checks."""
        head = (f"{self.src_addr}|{self.dst_addr}|{self.src_port}|{self.dst_port}|"
                f"{self.ts_val}|{self.ts_ecr}|{self.kind}|").encode()
        return head + self.payload


def classify(hdr: PacketHeader, reg: PortRegistry) -> PacketClass:
    if hdr.dst_port in reg:
        return PacketClass.OPSEC_BY_DST
    if hdr.src_port in reg:
        return PacketClass.OPSEC_BY_SRC
    return PacketClass.LEGACY


def allocate_hash_port(src_addr: str, dst_addr: str, reg: PortRegistry, in_use: set) -> int:
    """Smallest port of P not yet used by a flow between these two addresses."""
    for p in reg.ports:
        if (src_addr, dst_addr, p) not in in_use:
            in_use.add((src_addr, dst_addr, p))
            return p
    raise PortSetExhausted(f"all {len(reg.ports)} Opsec ports busy for {src_addr}->{dst_addr}")


def release_hash_port(src_addr: str, dst_addr: str, port: int, in_use: set) -> None:
    in_use.discard((src_addr, dst_addr, port))


def pack_ts(p_star: int, p_c: int) -> int:
    if not (1 <= p_star <= 65535 and 1 <= p_c <= 65535):
        raise ValueError(f"ports must be in 1..65535, got ({p_star}, {p_c})")
    return (p_star << 16) | p_c


def unpack_ts(value: int) -> tuple[int, int]:
    return (value >> 16) & 0xFFFF, value & 0xFFFF


def decode_ts_state(hdr: PacketHeader, reg: PortRegistry, value: int) -> FlowPortState | None:
    """Recover (p*, p_c) from a packed timestamp, or None if it is not one.

    Accepted only when p* is an Opsec port, p_c lies in the client/NAT
    ephemeral range, and the packet's server-side port is either
    ``registry[p*]`` or ``p*`` itself (already restored upstream).
    """
    if value == 0:
        return None
    p_star, p_c = unpack_ts(value)
    lo, hi = reg.ephemeral
    if p_star not in reg or not lo <= p_c <= hi:
        return None
    p_s = reg.listen_port(p_star)
    server_port = hdr.dst_port if hdr.direction is Direction.UP else hdr.src_port
    if server_port not in (p_s, p_star):
        return None
    return FlowPortState(p_c=p_c, p_star=p_star, p_s=p_s)


def rewrite_upstream(hdr: PacketHeader, state: FlowPortState, is_first_opsec_isp: bool,
                     reg: PortRegistry | None = None) -> PacketHeader:
    if is_first_opsec_isp:
        if hdr.dst_port != state.p_star or (reg is not None and hdr.dst_port not in reg):
            raise InconsistentState(
                f"first-ISP packet dst {hdr.dst_port} does not match p*={state.p_star}")
        if hdr.src_port != state.p_c:
            raise InconsistentState(f"packet src {hdr.src_port} does not match p_c={state.p_c}")
        if state.p_hash is None:
            raise InconsistentState("no p# allocated for this flow")
        return replace(hdr, src_port=state.p_hash, dst_port=state.p_s,
                       ts_val=pack_ts(state.p_star, state.p_c))
    # later ISPs see canonical ports already
    if hdr.dst_port != state.p_s or (state.p_hash is not None and hdr.src_port != state.p_hash):
        raise InconsistentState(
            f"packet ports ({hdr.src_port}, {hdr.dst_port}) do not match flow "
            f"(p#={state.p_hash}, p_s={state.p_s})")
    return hdr


def rewrite_downstream(hdr: PacketHeader, state: FlowPortState | None = None,
                       reg: PortRegistry | None = None) -> PacketHeader:
    if state is None:
        if reg is None:
            raise UnknownFlow("no flow state and no registry to decode ts_ecr")
        state = decode_ts_state(hdr, reg, hdr.ts_ecr)
        if state is None:
            raise UnknownFlow(f"no flow state and ts_ecr={hdr.ts_ecr} does not decode")
    return replace(hdr, src_port=state.p_star, dst_port=state.p_c)
