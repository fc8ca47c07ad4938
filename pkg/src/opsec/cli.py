"""opsec command line: handshake traces, simulations, routing plans and sweeps.

Exit codes: 0 success, 1 protocol-level failure, 2 config error, 3 infeasible plan.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from .netsim import ConfigInvalid, Simulation, load_sweep
from .netsim.metrics import metrics_json, sessions_csv, sweep_csv
from .routing import (CSV_HEADER, Graph, GraphError, Infeasible, IterationLimit, NoBox, TrafficMatrix,
                      box_ranking, calibrate_capacity, decompose_paths, gen_gravity_matrix, load_graph,
                      parse_ratios, plan_multi_box, plan_single_box, split_matrix, sweep_opsec_ratio,
                      synthetic_instance)
from .scenario import load_scenario

EXIT_OK, EXIT_PROTOCOL, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _seed_override() -> int | None:
    raw = os.environ.get("OPSEC_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigInvalid(f"OPSEC_SEED: not an integer: {raw!r}") from None


def _scenario(path, **traffic):
    cfg = load_scenario(path)
    seed = _seed_override()
    upd = {}
    if seed is not None:
        upd["seed"] = seed
    if traffic:
        upd["traffic"] = cfg.traffic.model_copy(update=traffic)
    return cfg.model_copy(update=upd) if upd else cfg


def _write(path, text: str) -> None:
    Path(path).write_text(text)


def _parse_log_line(line: str) -> dict:
    t, what, *rest = line.split(" ")
    d = {"t_us": int(t), "event": what}
    for kv in rest:
        k, _, v = kv.partition("=")
        d[k] = v
    return d


# -- handshake ------------------------------------------------------------------

def cmd_handshake(args) -> int:
    cfg = _scenario(args.scenario, sessions=1, legacy_flows=0)
    sim = Simulation(cfg, keep_events=True)
    m = sim.run()
    out = sys.stdout
    rtt = sim.rtt_us
    print(f"path RTT {rtt / 1000:.3f} ms, {len(sim.isps)} ISP(s), NAT {'on' if sim.nat_enabled else 'off'}", file=out)
    print(f"{'t_ms':>9}  {'hop':<8} {'dir':<4} {'kind':<7} {'ports':<13} messages", file=out)
    traces, legs, order, end = set(), [], [], None
    for line in sim.log.lines:
        e = _parse_log_line(line)
        if e["event"] in ("ready", "aborted", "terminated") and e.get("session") == "0" and end is None:
            end = e
        if end is not None:
            continue
        if e["event"] == "leg" and e.get("session") == "0":
            legs.append(e["leg"])
        if e["event"] != "pkt":
            continue
        conn = e["conn"]
        if sim.trace_owner.get(int(conn)) is not sim.agents[0]:
            continue
        traces.add(conn)
        sport, dport = e["src"].rsplit(":", 1)[1], e["dst"].rsplit(":", 1)[1]
        msgs = e.get("msgs", "")
        for name in msgs.split(","):
            base = name.split("@")[0]
            if base and base not in order:
                order.append(base)
        print(f"{e['t_us'] / 1000:9.3f}  {e['at']:<8} {e['dir']:<4} {e['kind']:<7} {sport + '->' + dport:<13} {msgs}",
              file=out)
    s = m.sessions[0]
    print(f"message order: {' '.join(order) if order else '(none)'}", file=out)
    if s.outcome == "ready":
        legs_rtt = Fraction(len(legs), 2)
        print(f"legs: {' '.join(legs)} = {len(legs)} one-way legs = {float(legs_rtt):g} RTT", file=out)
        print(f"elapsed: {float(s.handshake_rtt * rtt) / 1000:.3f} ms / {rtt / 1000:.3f} ms = "
              f"{float(s.handshake_rtt):g} RTT, {s.rounds} protocol round(s), {s.assignments} function assignment(s)",
              file=out)
        print("outcome: ready", file=out)
        return EXIT_OK
    why = s.abort_reason or s.outcome
    print(f"outcome: {s.outcome}", file=out)
    print(f"error: session {s.outcome}: {why}", file=sys.stderr)
    return EXIT_PROTOCOL


# -- simulate -------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _scenario(args.scenario)
    sim = Simulation(cfg, keep_events=bool(args.events))
    m = sim.run()
    q = cfg.queue
    if q.sweep_flows:
        rows = []
        for k, theta in enumerate(q.sweep_thetas):
            rng = np.random.default_rng([cfg.seed, k])
            rows += load_sweep(q.sweep_flows, theta, q.rate_pps, max(1, int(round(q.c_p_ms * 1000))),
                               int(round(q.duration_s * 1e6)), rng)
        table = sweep_csv(rows)
    else:
        table = sessions_csv(m)
    if args.out:
        _write(args.out, table)
    else:
        sys.stdout.write(table)
    if args.json:
        _write(args.json, metrics_json(m) + "\n")
    if args.events:
        _write(args.events, "".join(json.dumps(_parse_log_line(x), sort_keys=True) + "\n" for x in sim.log.lines))
    return EXIT_OK


# -- routing --------------------------------------------------------------------

def _node(g: Graph, raw: str):
    for v in g.nodes:
        if str(v) == raw.strip():
            return v
    raise UsageError(f"unknown node {raw!r}")


def _load_graph(spec: str, seed: int):
    """A graph file, or ``synthetic[:seed]`` for the generated 60-node instance."""
    if spec.startswith("synthetic"):
        _, _, s = spec.partition(":")
        g, t, ranked = synthetic_instance(int(s) if s else 4)
        g = g.with_capacity(calibrate_capacity(g, t))
        return g, t, ranked
    g = load_graph(spec)
    return g, None, None


def _load_matrix(path) -> TrafficMatrix:
    try:
        doc = json.loads(Path(path).read_text())
        return TrafficMatrix({(d["s"], d["t"]): d["volume"] for d in doc["demands"]})
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise GraphError(f"cannot read traffic matrix: {exc}") from None


def _matrix(args, g: Graph, builtin, seed: int) -> TrafficMatrix:
    if args.legacy:
        return _load_matrix(args.legacy)
    if args.gravity is not None:
        return gen_gravity_matrix(g, args.gravity, np.random.default_rng(seed))
    if builtin is not None:
        return builtin
    raise UsageError("need --legacy FILE or --gravity VOLUME")


def _ranked_boxes(g: Graph, ranked) -> list:
    order = ranked or box_ranking(g)
    declared = [b for b in order if b in g.boxes]
    return declared + [b for b in box_ranking(g) if b not in declared]


def _solution_json(sol, rep) -> str:
    def paths(d):
        return [{"path": list(p), "volume": v} for p, v in sorted(d.items(), key=lambda kv: repr(kv[0]))]

    opsec_keys = set(rep.opsec_paths)
    demands = []
    for (s, t) in sorted(rep.paths, key=repr):
        opsec = rep.opsec_paths.get((s, t), {})
        legacy = {p: v - opsec.get(p, 0) for p, v in rep.paths[(s, t)].items() if v - opsec.get(p, 0)}
        demands.append({"s": s, "t": t, "legacy": paths(legacy), "opsec": paths(opsec) if (s, t) in opsec_keys else []})
    doc = {"objective": sol.objective, "backend": sol.backend, "boxes": sorted(sol.model.boxes, key=repr),
           "tunnels": rep.tunnels, "baseline": rep.baseline, "demands": demands}
    return json.dumps(doc, indent=1) + "\n"


def _tunnels_csv(rep) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["s", "t", "kind", "path", "volume"])
    for (s, t) in sorted(rep.paths, key=repr):
        opsec = rep.opsec_paths.get((s, t), {})
        for p, v in sorted(rep.paths[(s, t)].items(), key=lambda kv: repr(kv[0])):
            kind = "opsec" if p in opsec and opsec[p] == v else "legacy" if p not in opsec else "mixed"
            w.writerow([s, t, kind, " ".join(str(x) for x in p), v])
    return buf.getvalue()


def cmd_plan(args) -> int:
    seed = _seed_override()
    seed = args.seed if seed is None else seed
    g, builtin, ranked = _load_graph(args.graph, seed)
    t = _matrix(args, g, builtin, seed)
    if not 0.0 <= args.opsec_ratio <= 1.0:
        raise UsageError("--opsec-ratio must lie in [0, 1]")
    boxes = [_node(g, b) for b in args.boxes.split(",") if b.strip()] if args.boxes else \
        _ranked_boxes(g, ranked)[:1]
    t_l, t_p = split_matrix(t, args.opsec_ratio)
    if len(boxes) == 1:
        sol = plan_single_box(g, t_l, t_p, boxes[0], args.backend, tie_break=True)
    else:
        sol = plan_multi_box(g, t_l, t_p, boxes, args.backend, tie_break=True)
    rep = decompose_paths(sol)
    if args.out:
        _write(args.out, _solution_json(sol, rep))
    if args.tunnels:
        _write(args.tunnels, _tunnels_csv(rep))
    print(f"objective {sol.objective}  tunnels {rep.tunnels}  baseline {rep.baseline}  "
          f"increase {100 * rep.relative_increase:.2f}%")
    return EXIT_OK


def _box_counts(spec: str) -> list[int]:
    spec = spec.strip()
    if ".." in spec:
        a, b = spec.split("..")
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in spec.split(",") if x.strip()]


def cmd_sweep(args) -> int:
    seed = _seed_override()
    seed = args.seed if seed is None else seed
    try:
        ratios = parse_ratios(args.ratios)
        counts = _box_counts(args.boxes_sweep)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["box_count"] + CSV_HEADER)
    if ratios and counts:
        g, builtin, ranked = _load_graph(args.graph, seed)
        t = _matrix(args, g, builtin, seed)
        order = _ranked_boxes(g, ranked)
        for k in counts:
            if not 1 <= k <= len(order):
                raise UsageError(f"box count {k} outside 1..{len(order)}")
            for row in sweep_opsec_ratio(g, t, ratios, order[:k], backend=args.backend):
                w.writerow([k] + row.row())
    if args.out:
        _write(args.out, buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# -- entry ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opsec", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    h = sub.add_parser("handshake", help="trace one session's handshake")
    h.add_argument("scenario")
    h.set_defaults(fn=cmd_handshake)

    s = sub.add_parser("simulate", help="run a scenario and write metrics")
    s.add_argument("scenario")
    s.add_argument("--out", help="CSV: per-session metrics, or the latency sweep when queue.sweep_flows is set")
    s.add_argument("--json", help="JSON summary")
    s.add_argument("--events", help="NDJSON event log")
    s.set_defaults(fn=cmd_simulate)

    for name, fn in (("plan", cmd_plan), ("sweep", cmd_sweep)):
        q = sub.add_parser(name)
        q.add_argument("graph", help="graph JSON file, or synthetic[:seed]")
        src = q.add_mutually_exclusive_group()
        src.add_argument("--legacy", help="traffic matrix JSON {demands: [{s, t, volume}]}")
        src.add_argument("--gravity", type=int, metavar="VOLUME", help="gravity matrix with this total volume")
        q.add_argument("--backend", default="auto", choices=["auto", "simplex", "highs"])
        q.add_argument("--seed", type=int, default=0, help="seed for --gravity (OPSEC_SEED wins)")
        q.add_argument("--out")
        q.set_defaults(fn=fn)
        if name == "plan":
            q.add_argument("--opsec-ratio", type=float, default=0.0)
            q.add_argument("--boxes", help="comma-separated box node ids")
            q.add_argument("--tunnels", help="tunnel CSV")
        else:
            q.add_argument("--ratios", default="0:0.5:0.05")
            q.add_argument("--boxes-sweep", default="1..4")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigInvalid, GraphError, NoBox, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Infeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except IterationLimit as exc:
        print(f"solver limit: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE


if __name__ == "__main__":
    sys.exit(main())
