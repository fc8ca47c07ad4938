import base64
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opsec.wire import (DEFAULT_PATH_BUDGET, END_TAG, OPSEC_PATH_PREFIX, START_TAG, MessageType, OpsecEnvelope,
                        OpsecMessage, PathBudgetExceeded, PayloadTooLong, append_to_envelope, decode_messages,
                        embed_in_path, encode_message, envelope_from_path, extract_from_path)

messages = st.builds(OpsecMessage, st.sampled_from(list(MessageType)), st.integers(0, 2**32 - 1),
                     st.binary(max_size=300))


def test_six_types_distinct_codes():
    assert len(MessageType) == 6
    assert len({int(t) for t in MessageType}) == 6
    assert all(0 <= int(t) < 2**16 for t in MessageType)


def test_empty_hello_is_18_octets():
    raw = encode_message(OpsecMessage(MessageType.OPSEC_HELLO, 0, b""))
    assert len(raw) == 18
    assert raw.startswith(START_TAG) and raw.endswith(END_TAG)
    assert START_TAG == b"OPS1" and END_TAG == b"1SPO"


def test_layout_is_big_endian():
    raw = encode_message(OpsecMessage(MessageType.OB_HELLO, 7, b"\xaa\xbb"))
    assert raw[4:6] == int(MessageType.OB_HELLO).to_bytes(2, "big")
    assert raw[6:10] == (7).to_bytes(4, "big")
    assert int.from_bytes(raw[10:14], "big") == 2
    assert raw[14:16] == b"\xaa\xbb"


def test_obhello_32_octets_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        m = OpsecMessage(MessageType(int(rng.choice([int(t) for t in MessageType]))),
                         int(rng.integers(0, 2**32)), rng.bytes(int(rng.integers(0, 64))))
        raw = encode_message(m)
        assert len(raw) == len(m.payload) + 18
        assert decode_messages(raw) == [m]
    m = OpsecMessage(MessageType.OB_HELLO, 7, bytes(range(32)))
    assert len(encode_message(m)) == 50


def test_payload_boundary():
    encode_message(OpsecMessage(MessageType.SERV_DISC, 0, bytes(65535)))
    with pytest.raises(PayloadTooLong):
        encode_message(OpsecMessage(MessageType.SERV_DISC, 0, bytes(65536)))


def test_scan_no_tag():
    assert decode_messages(b"GET /index.html HTTP/1.1\r\n") == []


def test_scan_between_junk():
    m1 = OpsecMessage(MessageType.OPSEC_HELLO, 0, b"abc")
    m2 = OpsecMessage(MessageType.SERV_ANN, 3, b"xyz" * 10)
    hay = b"GET /x" + encode_message(m1) + b"junk" + encode_message(m2)
    assert decode_messages(hay) == [m1, m2]


def test_truncated_candidate_skipped():
    good = OpsecMessage(MessageType.OB_READY, 9, b"sig")
    bad = START_TAG + int(MessageType.SERV_REQ).to_bytes(2, "big") + bytes(4) + (1000).to_bytes(4, "big") + b"short"
    assert decode_messages(bad + encode_message(good)) == [good]
    for cut in range(1, 18):
        prefix = encode_message(good)[:-cut]
        assert decode_messages(prefix + encode_message(good)) == [good]


def test_payload_may_contain_tags():
    m = OpsecMessage(MessageType.SERV_DISC, 0, START_TAG + END_TAG + START_TAG)
    assert decode_messages(encode_message(m)) == [m]


@settings(max_examples=300, deadline=None)
@given(messages)
def test_round_trip_property(m):
    assert decode_messages(encode_message(m)) == [m]


def test_scan_robust_fuzz():
    rng = np.random.default_rng(7)
    m = OpsecMessage(MessageType.SERV_REQ, 5, b"payload-bytes")
    raw = encode_message(m)
    for _ in range(100_000 // 10):
        n1 = rng.bytes(int(rng.integers(0, 40)))
        n2 = rng.bytes(int(rng.integers(0, 40)))
        assert m in decode_messages(n1 + raw + n2)


def test_embed_grammar_and_round_trip():
    hello = OpsecMessage(MessageType.OPSEC_HELLO, 0, b"k" * 96)
    path = embed_in_path([hello])
    assert path.startswith("/" + OPSEC_PATH_PREFIX + "/")
    token = path.split("/", 2)[2]
    assert set(token) <= set("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789-_")
    assert "=" not in token
    assert base64.urlsafe_b64decode(token + "=" * (-len(token) % 4)) == encode_message(hello)
    assert extract_from_path(path) == [hello]


@settings(max_examples=200, deadline=None)
@given(st.lists(messages, min_size=1, max_size=4))
def test_embed_property(ms):
    assert extract_from_path(embed_in_path(ms)) == ms


def test_plain_paths_yield_nothing():
    assert extract_from_path("/index.html") == []
    assert extract_from_path("/.opsec/!!!not-b64") == []
    assert extract_from_path("/.opsec/") == []


def test_servdisc_300_octets_path_length():
    m = OpsecMessage(MessageType.SERV_DISC, 0, bytes(300))
    path = embed_in_path([m])
    expected = 1 + len(OPSEC_PATH_PREFIX) + 1 + math.ceil((300 + 18) * 4 / 3)
    assert len(path) == expected <= 512


def test_redirect_location_reflection():
    from opsec.origin import ServerProfile, handle_get
    ms = [OpsecMessage(MessageType.OPSEC_HELLO, 0, b"h"), OpsecMessage(MessageType.SERV_DISC, 0, b"d")]
    path = embed_in_path(ms)
    resp, _, _ = handle_get(ServerProfile(), path)
    assert extract_from_path(resp.headers["Location"]) == ms


def test_append_preserves_prefix_and_order():
    hello = OpsecMessage(MessageType.OPSEC_HELLO, 0, b"h")
    env = envelope_from_path(embed_in_path([hello]))
    before = embed_in_path(env.messages)
    env2 = append_to_envelope(env, OpsecMessage(MessageType.OB_HELLO, 1, b"b"))
    assert [m.msg_type for m in env2.messages] == [MessageType.OPSEC_HELLO, MessageType.OB_HELLO]
    assert env.messages == (hello,)
    after = embed_in_path(env2.messages)
    # base64 of a prefix is a prefix up to the last full 3-octet group
    raw_before = encode_message(hello)
    keep = len(raw_before) // 3 * 4
    assert after.startswith(before[:len(before) - len(before.split("/", 2)[2]) + keep])


def test_append_by_three_boxes_in_path_order():
    env = OpsecEnvelope([OpsecMessage(MessageType.OPSEC_HELLO, 0, b"h")], "/")
    for box in (1, 2, 3):
        env = append_to_envelope(env, OpsecMessage(MessageType.OB_HELLO, box, b"x"))
    assert [m.box_id for m in extract_from_path(embed_in_path(env.messages))] == [0, 1, 2, 3]


def test_append_budget():
    env = OpsecEnvelope([OpsecMessage(MessageType.SERV_DISC, 0, bytes(2000))], "/")
    with pytest.raises(PathBudgetExceeded):
        append_to_envelope(env, OpsecMessage(MessageType.OB_HELLO, 1, bytes(1500)))
    assert DEFAULT_PATH_BUDGET == 4096
