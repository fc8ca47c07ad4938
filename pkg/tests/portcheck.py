"""Random path scenarios and the end-to-end port-plan checks run over them."""
from __future__ import annotations

import numpy as np

from opsec.netsim import Simulation
from opsec.scenario import default_scenario, parse_scenario


def random_scenario(seed: int, max_flows: int = 1000) -> dict:
    rng = np.random.default_rng(seed)
    n_opsec = int(rng.integers(0, 4))
    isps = []
    for k in range(n_opsec):
        isps.append({"isp_id": k + 1, "coverage": str(rng.choice(["up", "down", "both"])),
                     "catalog": ["ids"], "theta": 30})
    covs = [i["coverage"] for i in isps]
    if any(c in ("up", "both") for c in covs) and not any(c in ("down", "both") for c in covs):
        isps[int(rng.integers(n_opsec))]["coverage"] = "both"
    if not isps:
        isps.append({"isp_id": 1, "opsec": False})
    flows = int(np.exp(rng.uniform(0, np.log(max_flows))))
    legacy = int(rng.integers(0, max(1, flows // 4) + 1))
    d = default_scenario()
    d.update(seed=seed,
             path={"nat": bool(rng.integers(2)), "isps": isps},
             traffic={"sessions": flows, "mode": "ports-only", "legacy_flows": legacy, "start_spread_ms": 50})
    return d


def check_ports(sim: Simulation) -> dict:
    """Walk every connection the origin accepted and count port-plan violations.

    A flow counts as served when its SYN reaches the origin on p_s. Flows a
    box had to pass through because the hash-port set ran dry are the only
    ones allowed to arrive otherwise, so their number must match what the
    boxes report as exhausted.
    """
    reg = sim.registry
    cfg = sim.cfg
    p_s = sim.profile.listen_port
    up_pos = [i.pos for i in sim.isps if i.pool is not None and i.coverage.up]
    first_up = min(up_pos) if up_pos else None
    v = {"server_dst": 0, "client_ports": 0, "isp_src": 0, "collisions": sim.server_collisions,
         "unserved": 0, "served": 0, "opsec_flows": 0,
         "exhausted": next((i.pool.box.stats.exhausted for i in sim.isps if i.pos == first_up), 0)}
    syn_at_origin = {o[0]: o for o in sim.obs_server if o[5] == "syn"}
    isp_up: dict[int, list] = {}
    for pos, tr, src, dst, kind in sim.obs_isp_up:
        isp_up.setdefault(tr, []).append((pos, src, dst, kind))
    edge: dict[int, list] = {}
    for tr, src, dst, kind in sim.obs_client_edge:
        edge.setdefault(tr, []).append((src, dst, kind))
    for tr, (_idx, opsec, p_star) in sim.trace_info.items():
        if not opsec or p_star == p_s:
            continue
        syn = syn_at_origin.get(tr)
        if syn is None:
            continue
        v["opsec_flows"] += 1
        if syn[4] != p_s or first_up is None:
            v["unserved"] += 1
            continue
        v["served"] += 1
        if syn[3] not in reg:
            v["server_dst"] += 1
        for o in sim.obs_server:
            if o[0] == tr and (o[4] != p_s or o[3] not in reg):
                v["server_dst"] += 1
        seen = isp_up.get(tr, [])
        for pos, src, _dst, _k in seen:
            if pos > first_up and src not in reg:
                v["isp_src"] += 1
        if cfg.path.nat:
            p_c = sim.wire_port.get(tr)
        else:
            syns = [s for s in seen if s[3] == "syn"]
            p_c = syns[0][1] if syns else None
        for src, dst, _k in edge.get(tr, []):
            if src != p_star or dst != p_c:
                v["client_ports"] += 1
    # every flow the first box could not give a hash port is passed through;
    # with no box on the way up nothing is served at all
    want = v["exhausted"] if first_up is not None else v["opsec_flows"]
    v["accounting"] = 0 if v["unserved"] == want else abs(v["unserved"] - want)
    return v


VIOLATIONS = ("server_dst", "client_ports", "isp_src", "collisions", "accounting")


def run_checked(d: dict):
    sim = Simulation(parse_scenario(d))
    m = sim.run()
    return m, check_ports(sim)
