from fractions import Fraction

import numpy as np
import pytest

from opsec.netsim import build
from opsec.netsim.scaling import ScaleController, departures, load_sweep, scale_controller, sojourn_times
from opsec.scenario import ConfigInvalid

from conftest import isp, scenario, simulate
from oracles import md1_sojourn_quantile


def test_minimal_config_builds():
    sim = build(scenario())
    assert sim is not None


def test_port_set_overlapping_ephemeral_rejected():
    with pytest.raises(ConfigInvalid):
        build(scenario(ports=[{"opsec_port": 50000, "listen_port": 443}]))


def test_identical_builds_identical_digests():
    kw = dict(traffic={"sessions": 4, "legacy_flows": 3}, path={"nat": True, "isps": [isp()]})
    digests = {simulate(**kw).event_digest for _ in range(3)}
    assert len(digests) == 1
    assert simulate(seed=8, **kw).event_digest not in digests


def test_handshake_is_three_and_a_half_rtt(honest):
    s = honest.sessions[0]
    assert s.outcome == "ready" and s.handshake_rtt == Fraction(7, 2) == s.handshake_legs


def test_close_after_response_costs_another_tcp_handshake():
    s = simulate(origin={"close_after_response": True}).sessions[0]
    assert s.outcome == "ready" and s.handshake_rtt == 5 and s.reconnects == 1


def test_no_willing_isp_is_ready_without_assignments():
    s = simulate(path={"isps": [isp(willing=False)]}).sessions[0]
    assert s.outcome == "ready" and s.assignments == 0
    assert s.handshake_rtt == Fraction(5, 2)  # discovery round still paid


def test_nat_path_keeps_ports_transparent():
    m = simulate(path={"nat": True, "isps": [isp()]})
    s = m.sessions[0]
    assert s.outcome == "ready" and s.assignments == 3
    assert s.byte_identical and s.ts_transparent


def test_nat_hash_port_exhaustion_degrades_to_passthrough():
    # five NATed clients share one address pair; 443 has only two ports in P
    m = simulate(path={"nat": True, "isps": [isp()]}, traffic={"sessions": 5})
    assert m.isps[0].exhausted >= 1
    assert all(s.outcome == "ready" and s.byte_identical for s in m.sessions)
    assert any(s.assignments == 0 for s in m.sessions)


def test_scale_controller_counts():
    assert max(scale_controller(30, 90)) + 1 == 3
    assert scale_controller(30, 1) == [0]
    assert set(scale_controller(None, 200)) == {0}
    with pytest.raises(ValueError):
        ScaleController(0)


def test_scale_controller_no_migration():
    ctl = ScaleController(2)
    a, b, c = ctl.add_flow(), ctl.add_flow(), ctl.add_flow()
    assert (a, b, c) == (0, 0, 1) and ctl.instance_count == 2
    ctl.remove_flow(a)
    ctl.remove_flow(b)
    assert ctl.instance_count == 2  # instance 1 still carries its flow
    assert ctl.add_flow() == 0      # least loaded, lowest id


def test_static_latency_grows_with_flows():
    rows = load_sweep([1, 50, 150, 200], None)
    assert all(r.instances == 1 for r in rows)
    q = [r.p95_latency_ms for r in rows]
    assert q == sorted(q) and q[-1] > 10 * q[0]
    dyn = load_sweep([1, 50, 150, 200], 30)
    assert [r.instances for r in dyn] == [1, 2, 5, 7]


def test_sojourn_p95_matches_md1_oracle():
    # 150 flows x 100 pps on one 50 us server: rho = 0.75
    rng = np.random.default_rng(3)
    lam = 150 * 100 / 1e6
    arr = np.sort(rng.uniform(0, 20e6, int(lam * 20e6))).astype(np.int64)
    got = np.percentile(sojourn_times(arr, 50), 95)
    want = md1_sojourn_quantile(0.95, lam, 50)
    assert abs(got - want) / want < 0.05


def test_departure_recursion():
    assert departures(np.array([0, 0, 100, 101]), 10).tolist() == [10, 20, 110, 120]


def test_tamper_aborts():
    s = simulate(path={"isps": [isp(adversary="tampers_servdisc")]}).sessions[0]
    assert s.outcome == "aborted" and s.abort_reason == "transcript tampered"


def test_fake_quote_excluded_honest_kept():
    m = simulate(path={"isps": [isp(1, adversary="fake_quote"), isp(2)]})
    s = m.sessions[0]
    assert s.outcome == "ready" and s.assignments == 3
    assert simulate(path={"isps": [isp(adversary="fake_quote")]}).sessions[0].assignments == 0


def test_drops_policy_matrix():
    open_ = simulate(path={"isps": [isp(adversary="drops_opsec")]}).sessions[0]
    assert open_.outcome == "ready" and open_.fell_back and open_.assignments == 0
    closed = simulate(path={"isps": [isp(adversary="drops_opsec")]}, client={"fail_mode": "fail_closed"})
    assert closed.sessions[0].outcome == "aborted"


def test_byte_conservation():
    m = simulate(traffic={"sessions": 3, "legacy_flows": 2, "bodies": ["x" * 100, "y" * 50]})
    for s in m.sessions:
        assert s.app_bytes_sent == s.app_bytes_delivered + s.app_bytes_dropped


def test_legacy_isp_never_rewrites():
    m = simulate(path={"isps": [isp(opsec=False)]}, traffic={"sessions": 0, "legacy_flows": 5})
    assert m.isps[0].rewritten == 0
    assert all(s.kind == "legacy" and s.byte_identical for s in m.sessions)


def test_exhausted_flows_fall_back_behind_nat():
    # replies to passed-through flows must not be "restored" to pre-NAT ports
    m = simulate(path={"nat": True, "isps": [isp(1), isp(2)]},
                 traffic={"sessions": 40, "mode": "ports-only", "start_spread_ms": 5})
    assert m.isps[0].exhausted > 0 and m.nat_drops == 0
    assert all(s.outcome == "completed" and s.byte_identical for s in m.sessions)
    assert sum(s.fell_back for s in m.sessions) == m.isps[0].exhausted
