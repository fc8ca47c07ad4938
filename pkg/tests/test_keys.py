import dataclasses

import numpy as np
import pytest

from opsec.keys import (BOX_CODE_HASH, MASTER_SECRET_LEN, SESSION_KEY_LEN, AttestationAuthority,
                        AttestationQuote, AuthenticationFailure, HopChannel, ReplayDetected, UnknownIdentity,
                        asym_open, asym_seal, derive_master_secret, derive_session_keys, fresh_nonce,
                        generate_keypair, issue_quote, open_record, seal, sign, sign_transcript, verify,
                        verify_quote, verify_transcript)
from opsec.keys import RecordReceiver, RecordSender


def rng(seed=0):
    return np.random.default_rng(seed)


def bits(b: bytes) -> np.ndarray:
    return np.unpackbits(np.frombuffer(b, dtype=np.uint8))


def test_keypair_deterministic():
    assert generate_keypair(rng(5)).public_part == generate_keypair(rng(5)).public_part
    assert generate_keypair(rng(5)).public_part != generate_keypair(rng(6)).public_part


def test_sign_verify():
    a, b = generate_keypair(rng(1)), generate_keypair(rng(2))
    sig = sign(a.private_part, b"any message")
    assert verify(a.public_part, b"any message", sig)
    assert not verify(b.public_part, b"any message", sig)
    assert not verify(a.public_part, b"any messagE", sig)


def test_nonce_collisions():
    r = rng(3)
    draws = np.frombuffer(r.bytes(32 * 1_000_000), dtype=np.uint8).reshape(-1, 32)
    assert len({row.tobytes() for row in draws}) == len(draws)
    assert len(fresh_nonce(r)) == 32


def test_master_secret():
    r = rng(4)
    cn, bn, ent = fresh_nonce(r), fresh_nonce(r), r.bytes(48)
    ms = derive_master_secret(cn, bn, ent)
    assert len(ms) == MASTER_SECRET_LEN == 48
    assert ms == derive_master_secret(cn, bn, ent)
    with pytest.raises(ValueError):
        derive_master_secret(cn, bn, b"")


def test_master_secret_avalanche():
    r = rng(5)
    fracs = []
    for _ in range(1000):
        cn, bn, ent = bytearray(fresh_nonce(r)), fresh_nonce(r), r.bytes(48)
        a = derive_master_secret(bytes(cn), bn, ent)
        k = int(r.integers(256))
        cn[k // 8] ^= 1 << (k % 8)
        b = derive_master_secret(bytes(cn), bn, ent)
        fracs.append((bits(a) != bits(b)).mean())
    assert np.mean(fracs) >= 0.30
    assert min(fracs) > 0.25


def test_session_keys():
    r = rng(6)
    for _ in range(10_000):
        ms, cn, bn = r.bytes(48), r.bytes(32), r.bytes(32)
        up, down = derive_session_keys(ms, cn, bn)
        assert up != down and len(up) == SESSION_KEY_LEN
    # both ends derive the same keys; a new box nonce changes both
    client = HopChannel(ms, cn, bn)
    box = HopChannel(ms, cn, bn)
    assert (client.key_up, client.key_down) == (box.key_up, box.key_down)
    other = HopChannel(ms, cn, r.bytes(32))
    assert other.key_up != client.key_up and other.key_down != client.key_down


def test_seal_round_trip_and_replay():
    key = rng(7).bytes(32)
    rec = seal(key, 5, b"hello")
    assert open_record(key, 5, rec) == b"hello"
    with pytest.raises(AuthenticationFailure):
        open_record(key, 6, rec)
    with pytest.raises(AuthenticationFailure):
        open_record(rng(8).bytes(32), 5, rec)
    rx = RecordReceiver(key)
    assert rx.open(rec) == b"hello"
    with pytest.raises(ReplayDetected):
        rx.open(rec)


def test_seal_mutations_all_detected():
    r = rng(9)
    tx = RecordSender(r.bytes(32))
    detected = 0
    for _ in range(10_000):
        pt = r.bytes(int(r.integers(0, 64)))
        rec = bytearray(tx.seal(pt))
        k = int(r.integers(len(rec) * 8))
        rec[k // 8] ^= 1 << (k % 8)
        try:
            open_record(tx.key, tx.counter, bytes(rec))
        except AuthenticationFailure:
            detected += 1
    assert detected == 10_000


def test_hop_channel_counters():
    r = rng(10)
    ms, cn, bn = r.bytes(48), r.bytes(32), r.bytes(32)
    a, b = HopChannel(ms, cn, bn), HopChannel(ms, cn, bn)
    recs = [a.seal(a.key_up, f"m{i}".encode()) for i in range(3)]
    assert [b.open(b.key_up, x) for x in recs] == [b"m0", b"m1", b"m2"]
    with pytest.raises(ReplayDetected):
        b.open(b.key_up, recs[1])


def test_asym_seal():
    r = rng(11)
    a, b = generate_keypair(r), generate_keypair(r)
    blob = asym_seal(a.public_part, b"secret", r)
    assert asym_open(a.private_part, blob) == b"secret"
    with pytest.raises(AuthenticationFailure):
        asym_open(b.private_part, blob)


def test_transcript():
    r = rng(12)
    box, other = generate_keypair(r), generate_keypair(r)
    disc, req = r.bytes(120), r.bytes(200)
    sig = sign_transcript(box.private_part, disc, req)
    assert verify_transcript(box.public_part, disc, req, sig)
    assert not verify_transcript(other.public_part, disc, req, sig)
    assert not verify_transcript(box.public_part, req, disc, sig)


def test_transcript_mutation_fuzz():
    r = rng(13)
    box = generate_keypair(r)
    disc, req = r.bytes(100), r.bytes(100)
    sig = sign_transcript(box.private_part, disc, req)
    for i in range(10_000):
        seg = bytearray(disc if i % 2 else req)
        op = i % 3
        k = int(r.integers(len(seg)))
        if op == 0:
            seg[k] ^= int(r.integers(1, 256))
        elif op == 1:
            del seg[k]
        else:
            seg.insert(k, int(r.integers(256)))
        args = (bytes(seg), req) if i % 2 else (disc, bytes(seg))
        assert not verify_transcript(box.public_part, *args, sig)


def test_attestation():
    r = rng(14)
    auth = AttestationAuthority(r)
    kp = generate_keypair(r)
    auth.register(3, BOX_CODE_HASH)
    q = issue_quote(auth, 3, BOX_CODE_HASH, kp.public_part)
    assert verify_quote(auth.public, q, kp.public_part)
    altered = dataclasses.replace(q, code_hash=bytes(32))
    assert not verify_quote(auth.public, altered)
    assert not verify_quote(auth.public, AttestationQuote.from_bytes(q.to_bytes()), generate_keypair(r).public_part)
    with pytest.raises(UnknownIdentity):
        issue_quote(auth, 4, BOX_CODE_HASH, kp.public_part)


def test_self_made_quote_rejected():
    r = rng(15)
    auth, fake = AttestationAuthority(r), AttestationAuthority(r)
    kp = generate_keypair(r)
    fake.register(9)
    q = fake.issue_quote(9, BOX_CODE_HASH, kp.public_part)
    assert verify_quote(fake.public, q)
    assert not verify_quote(auth.public, q)
