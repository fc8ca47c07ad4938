"""Port-translating NAT in front of the client hosts."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from ..portplan import DEFAULT_EPHEMERAL, Direction, PacketHeader


class NatTableFull(Exception):
    pass


@dataclass
class NatState:
    outside_addr: str = "192.0.2.1"
    port_range: tuple = DEFAULT_EPHEMERAL
    rng: object = None
    out_map: dict = field(default_factory=dict)  # (inside addr, inside port) -> outside port
    in_map: dict = field(default_factory=dict)   # outside port -> (inside addr, inside port)
    drops: int = 0

    def _allocate(self) -> int:
        lo, hi = self.port_range
        size = hi - lo + 1
        if len(self.in_map) >= size:
            raise NatTableFull(f"all {size} outside ports mapped")
        start = int(self.rng.integers(size)) if self.rng is not None else 0
        for k in range(size):
            p = lo + (start + k) % size
            if p not in self.in_map:
                return p
        raise NatTableFull("no free outside port")  # pragma: no cover


def nat_rewrite(nat: NatState, pkt: PacketHeader) -> PacketHeader | None:
    """Translate one packet; None means dropped (unmapped reply or full table)."""
    if pkt.direction is Direction.UP:
        key = (pkt.src_addr, pkt.src_port)
        port = nat.out_map.get(key)
        if port is None:
            try:
                port = nat._allocate()
            except NatTableFull:
                nat.drops += 1
                return None
            nat.out_map[key] = port
            nat.in_map[port] = key
        return replace(pkt, src_addr=nat.outside_addr, src_port=port)
    inside = nat.in_map.get(pkt.dst_port) if pkt.dst_addr == nat.outside_addr else None
    if inside is None:
        nat.drops += 1
        return None
    return replace(pkt, dst_addr=inside[0], dst_port=inside[1])
