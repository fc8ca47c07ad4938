"""A hand-driven client -> boxes -> origin path, no event loop.

Used where a test wants to hold a ClientSession between rounds or to
interfere with individual responses.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from opsec.client import SessionPolicy, SfcSpec, Target, begin_session, on_response_1, on_response_2
from opsec.keys import BOX_CODE_HASH, AttestationAuthority, generate_keypair
from opsec.obox import Coverage, make_sf, BoxState
from opsec.origin import Response, ServerProfile, handle_get, parse_request_path
from opsec.payloads import sf_id
from opsec.portplan import Direction, PacketHeader, PortRegistry

CLIENT, SERVER = "198.51.0.1", "203.0.113.10"

SFS = {
    "ids": {"kind": "ids", "name": "ids", "signatures": [
        {"pattern": "malware-sig-01", "verdict": "alert", "reason": "known malware signature"}]},
    "url-filter": {"kind": "url-blocklist", "name": "url-filter", "blocked": ["/blocked"]},
}


class Path:
    def __init__(self, specs, seed=0, profile=None):
        """``specs``: list of (box_id, catalog names, coverage)."""
        self.rng = np.random.default_rng(seed)
        self.reg = PortRegistry.default()
        self.authority = AttestationAuthority(self.rng)
        self.sfs = {n: make_sf(d) for n, d in SFS.items()}
        self.boxes = []
        for bid, cat, cov in specs:
            kp = generate_keypair(self.rng)
            self.authority.register(bid, BOX_CODE_HASH)
            q = self.authority.issue_quote(bid, BOX_CODE_HASH, kp.public_part)
            sfs = [self.sfs[n] if isinstance(n, str) else n for n in cat]
            self.boxes.append(BoxState(bid, kp, q, sfs, self.reg, self.rng,
                                       Coverage(cov)))
        self.profile = profile or ServerProfile()
        self.tap: list = []   # every upstream data packet as seen by the origin
        self.hops: list = []  # (box id, packet it forwarded upstream)

    def up(self, pkt):
        for b in self.boxes:
            if pkt is None:
                return None
            if b.coverage.up:
                pkt = b.process(pkt).forward
                self.hops.append((b.box_id, pkt))
        return pkt

    def down(self, pkt):
        for b in reversed(self.boxes):
            if pkt is None:
                return None
            if b.coverage.down:
                pkt = b.process(pkt).forward
        return pkt

    def reply(self, pkt, kind, payload=b""):
        return PacketHeader(SERVER, pkt.src_addr, pkt.dst_port, pkt.src_port, ts_val=1000, ts_ecr=pkt.ts_val,
                            direction=Direction.DOWN, kind=kind, payload=payload)

    def connect(self, p_c, p_star, ts_val):
        syn = self.up(PacketHeader(CLIENT, SERVER, p_c, p_star, ts_val=ts_val, kind="syn"))
        self.down(self.reply(syn, "synack"))
        return syn

    def get(self, req, p_c, mutate=None):
        """Send one GET over a fresh connection; returns the reflected response bytes."""
        self.connect(p_c, req.dst_port, req.ts_val)
        pkt = self.up(PacketHeader(CLIENT, SERVER, p_c, req.dst_port, ts_val=req.ts_val, payload=req.payload))
        if mutate is not None:
            pkt = mutate(pkt)
        self.tap.append(pkt)
        resp, _ecr, _close = handle_get(self.profile, parse_request_path(pkt.payload), pkt.ts_val)
        back = self.down(self.reply(pkt, "data", resp.to_bytes()))
        return back.payload

    def handshake(self, sfc_up=("ids",), sfc_down=(), policy=None, drop_ready=False, p_c=51000):
        sfc = SfcSpec(tuple(sf_id(n) for n in sfc_up), tuple(sf_id(n) for n in sfc_down))
        s, req = begin_session(Target(SERVER), sfc, policy or SessionPolicy(), self.rng, self.reg, p_c,
                               self.authority.public, CLIENT)
        s, req2 = on_response_1(s, self.get(req, p_c), self.rng)
        if req2 is None:
            return s
        raw = self.get(req2, p_c)
        if drop_ready:
            raw = strip_ready(raw, s.sent)
        self.p_c = p_c
        return on_response_2(s, raw)

    def send(self, session, data: bytes):
        """One application record upstream; returns what the origin receives."""
        from opsec.client import send_app_data
        (pkt,) = send_app_data(session, data)
        out = self.up(pkt)
        self.tap.append(out)
        return out


def strip_ready(raw: bytes, sent) -> bytes:
    """Rewrite a reflected response so it carries no ObReady at all."""
    from opsec.wire import MessageType, embed_in_path, find_tokens, extract_from_path
    resp = Response.from_bytes(raw)
    text = resp.to_bytes().decode()
    for tok in find_tokens(text):
        msgs = [m for m in extract_from_path(tok) if m.msg_type is not MessageType.OB_READY]
        text = text.replace(tok, embed_in_path(msgs) if msgs else "/")
    return text.encode()


__all__ = ["Path", "replace", "strip_ready"]
