import pickle
from dataclasses import dataclass, field, replace

import pytest

from opsec.obox import PASS, Coverage, SecurityFunction, Verdict, VerdictKind, make_sf
from opsec.payloads import announce_hash, parse_record, sf_id
from opsec.portplan import PacketHeader
from opsec.wire import MessageType, extract_from_path

from harness import CLIENT, SERVER, Path


def _msgs(pkt):
    return extract_from_path(pkt.payload.split(b" ")[1].decode())


@dataclass
class Recorder(SecurityFunction):
    """Logs each inspection into a shared list."""

    name: str = "rec"
    log: list = field(default_factory=list)
    direction: str = "both"

    def inspect(self, payload, ctx):
        self.log.append((self.name, payload))
        return PASS


def test_first_box_appends_obhello_and_servann():
    p = Path([(1, ["ids"], "both")])
    s = p.handshake()
    first = p.tap[0]
    types = [m.msg_type for m in _msgs(first)]
    assert types == [MessageType.OPSEC_HELLO, MessageType.SERV_DISC, MessageType.OB_HELLO, MessageType.SERV_ANN]
    assert first.dst_port == 443  # p* rewritten to the service port
    assert s.discovered[1].verified


def test_non_selected_box_forwards_servreq_untouched():
    p = Path([(1, ["ids"], "both"), (2, ["url-filter"], "both")])
    s = p.handshake(sfc_up=("ids",))
    assert [a.box_id for a in s.assignments] == [1]
    audit2 = p.boxes[1].audit
    assert any(e[0] == "not_selected" for e in audit2)
    assert not any(e[0] == "open_secret" for e in audit2)
    assert ("open_secret", s.session_id.hex(), True) in p.boxes[0].audit
    # box 2 left the ServReq bytes as it received them
    (b1_out,) = [pkt for bid, pkt in p.hops if bid == 1 and pkt.payload.startswith(b"GET")][-1:]
    (b2_out,) = [pkt for bid, pkt in p.hops if bid == 2 and pkt.payload.startswith(b"GET")][-1:]
    assert b1_out.payload == b2_out.payload


def test_catalog_lookup():
    p = Path([(1, ["ids"], "both")])
    b = p.boxes[0]
    a, other = sf_id("ids"), sf_id("nope")
    assert b.catalog_lookup([a, other]) == [announce_hash(a)]
    assert b.catalog_lookup([]) == []
    assert b.catalog_lookup([a, a]) == [announce_hash(a)] * 2


def test_alert_still_forwards():
    p = Path([(1, ["ids"], "both")])
    s = p.handshake()
    out = p.boxes[0].process(_data(s, b"malware-sig-01 inside"))
    assert out.forward is not None and out.forward.payload == b"malware-sig-01 inside"
    assert len(out.alerts) == 1 and out.alerts[0].kind == "alert"


def test_terminate_drops_and_stops_session():
    p = Path([(1, ["url-filter"], "both")])
    s = p.handshake(sfc_up=("url-filter",))
    out = p.boxes[0].process(_data(s, b"GET /blocked/x HTTP/1.1\r\n\r\n"))
    assert out.forward is None and out.note == "terminate" and len(out.alerts) == 1
    assert p.boxes[0].process(_data(s, b"GET /ok HTTP/1.1\r\n\r\n")).forward is None


def _data(s, data):
    from opsec.client import send_app_data
    (pkt,) = send_app_data(s, data)
    return pkt


def test_unknown_flow_on_opsec_port_passes_through():
    p = Path([(1, ["ids"], "both")])
    pkt = PacketHeader(CLIENT, SERVER, 52000, 7443, payload=b"\x17\x03\x03random bytes")
    out = p.boxes[0].process(pkt)
    assert out.forward is not None and out.forward.payload == pkt.payload
    legacy = PacketHeader(CLIENT, SERVER, 52001, 443, payload=b"legacy")
    assert p.boxes[0].process(legacy).forward == legacy


def test_chain_runs_in_requested_order():
    log: list = []
    a, b, c = Recorder("rec-a", log), Recorder("rec-b", log), Recorder("rec-c", log)
    p = Path([(1, [c, a, b], "both")])
    s = p.handshake(sfc_up=("rec-b", "rec-c", "rec-a"))
    assert p.boxes[0].session_chain(s.session_id, _up()) == ["rec-b", "rec-c", "rec-a"]
    p.send(s, b"payload-1")
    assert [n for n, _ in log] == ["rec-b", "rec-c", "rec-a"]
    assert all(x == b"payload-1" for _, x in log)


def _up():
    from opsec.portplan import Direction
    return Direction.UP


def test_payload_sealed_between_boxes():
    p = Path([(1, ["ids"], "both"), (2, ["url-filter"], "both")])
    s = p.handshake(sfc_up=("ids", "url-filter"))
    p.hops.clear()
    secret = b"GET /secret-path HTTP/1.1\r\n\r\n"
    assert p.send(s, secret).payload == secret
    between = [pkt for bid, pkt in p.hops if bid == 1][0]
    assert secret not in between.payload and b"secret-path" not in between.payload
    rec = parse_record(between.payload)
    assert rec is not None and rec[1] == 2  # addressed to the next box


def test_enclave_state_not_exportable():
    p = Path([(1, ["ids"], "both")])
    with pytest.raises(TypeError):
        pickle.dumps(p.boxes[0])


def test_make_sf_kinds():
    ids = make_sf({"kind": "ids", "name": "x", "signatures": [{"pattern": "evil", "verdict": "terminate"}]})
    v = ids.inspect(b"so evil", None)
    assert v.kind is VerdictKind.TERMINATE and ids.id == sf_id("x")
    assert make_sf({"kind": "byte-counter"}).inspect(b"x", None) == Verdict()
    assert Coverage("up").up and not Coverage("up").down


@pytest.mark.parametrize("damage", ["token", "payload"])
def test_damaged_servreq_is_answered_not_ignored(damage):
    # a fail-open client would carry on past a silent box, so the box
    # signs what it saw and the client catches the mismatch
    from opsec.client import AbortReason, SessionPolicy, SessionState, SfcSpec, Target, begin_session, on_response_1, on_response_2

    p = Path([(1, ["ids"], "both")])
    sfc = SfcSpec((sf_id("ids"),), ())
    s, req = begin_session(Target(SERVER), sfc, SessionPolicy(), p.rng, p.reg, 51000, p.authority.public, CLIENT)
    s, req2 = on_response_1(s, p.get(req, 51000), p.rng)
    line, rest = req2.payload.split(b"\r\n", 1)
    verb, path, ver = line.split(b" ")
    if damage == "token":
        assert b"/.opsec/" in path
        path = path.replace(b"/.opsec/", b"/.opsex/")
    else:
        mid = len(path) // 2
        path = path[:mid] + (b"A" if path[mid:mid + 1] != b"A" else b"B") + path[mid + 1:]
    bad = replace(req2, payload=b" ".join([verb, path, ver]) + b"\r\n" + rest)
    s = on_response_2(s, p.get(bad, 51000))
    assert s.state is SessionState.ABORTED and s.abort_reason is AbortReason.TRANSCRIPT_TAMPERED
    assert any(e[0] == "nack" for e in p.boxes[0].audit)
