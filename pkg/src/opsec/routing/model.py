"""Cost-optimal routing ILP for legacy and Opsec demands.

Variables are per-commodity flows on directed links. Legacy demands get the
usual conservation rows. An Opsec demand (s, t) is split into an inbound
half s -> box and an outbound half box -> t of the same volume. With one box
both halves are ordinary flows ending/starting at it. With a box set M the
box is a logical node: conservation is written for nodes outside M only,
one aggregated row over M replaces the per-box rows, and a coupling row at
each box forces what the inbound half drops there to equal what the
outbound half picks up. Link capacities bound the sum over commodities.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .graph import Graph, TrafficMatrix
from .simplex import LpStatus, branch_and_bound

log = logging.getLogger(__name__)


class Infeasible(Exception):
    pass


class NoBox(ValueError):
    pass


class IterationLimit(Exception):
    pass


@dataclass(frozen=True)
class Commodity:
    kind: str          # legacy | opsec_in | opsec_out
    s: object          # demand source
    t: object          # demand target
    volume: int
    src: object = None  # flow source (None: the logical box)
    dst: object = None  # flow sink (None: the logical box)


@dataclass
class RoutingModel:
    graph: Graph
    commodities: list
    arcs: list
    c: np.ndarray
    A_eq: sparse.csr_matrix
    b_eq: np.ndarray
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    boxes: frozenset
    multi: bool

    @property
    def n_vars(self) -> int:
        return len(self.c)

    def var(self, k: int, a: int) -> int:
        return k * len(self.arcs) + a


@dataclass
class FlowSolution:
    model: RoutingModel
    flows: list            # per commodity: {arc: int volume}
    objective: int
    backend: str = ""
    nodes: int = 0
    branches: int = 0

    @property
    def commodities(self) -> list:
        return self.model.commodities

    def legacy(self) -> dict:
        return {(c.s, c.t): f for c, f in zip(self.commodities, self.flows) if c.kind == "legacy"}

    def opsec(self) -> dict:
        """(s, t) -> (inbound flow, outbound flow)."""
        out: dict = {}
        for c, f in zip(self.commodities, self.flows):
            if c.kind == "opsec_in":
                out.setdefault((c.s, c.t), [None, None])[0] = f
            elif c.kind == "opsec_out":
                out.setdefault((c.s, c.t), [None, None])[1] = f
        return {k: tuple(v) for k, v in out.items()}

    def link_load(self) -> dict:
        load: dict = {}
        for f in self.flows:
            for a, v in f.items():
                load[a] = load.get(a, 0) + v
        return load


class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.b = [], [], [], []

    def add(self, coeffs: dict, rhs) -> None:
        i = len(self.b)
        for j, v in coeffs.items():
            if v:
                self.r.append(i)
                self.c.append(j)
                self.v.append(v)
        self.b.append(rhs)

    def matrix(self, n: int):
        m = sparse.csr_matrix((self.v, (self.r, self.c)), shape=(len(self.b), n), dtype=float)
        return m, np.asarray(self.b, dtype=float)


def _commodities(t_l: TrafficMatrix, t_p: TrafficMatrix, box, multi: bool) -> list:
    cs = [Commodity("legacy", s, t, v, s, t) for (s, t), v in sorted(t_l.demands.items()) if v]
    for (s, t), v in sorted(t_p.demands.items()):
        if not v:
            continue
        m = None if multi else box
        cs.append(Commodity("opsec_in", s, t, v, s, m))
        cs.append(Commodity("opsec_out", s, t, v, m, t))
    return cs


def build_model(g: Graph, t_l: TrafficMatrix, t_p: TrafficMatrix, boxes, multi: bool) -> RoutingModel:
    boxes = frozenset(boxes)
    if t_p.demands and not boxes:
        raise NoBox("Opsec demands need at least one box node")
    if boxes & g.external:
        raise NoBox("box nodes must be internal")
    for s, t in list(t_l.demands) + list(t_p.demands):
        if s not in g.external or t not in g.external:
            raise ValueError(f"demand ({s}, {t}) must join external nodes")
    arcs = sorted(g.cost, key=repr)
    na = len(arcs)
    cs = _commodities(t_l, t_p, next(iter(boxes)) if len(boxes) == 1 and not multi else None, multi)
    if not multi and len(boxes) > 1 and t_p.demands:
        raise ValueError("single-box model takes exactly one box")
    n = na * len(cs)
    out_arcs: dict = {v: [] for v in g.nodes}
    in_arcs: dict = {v: [] for v in g.nodes}
    for a, (u, w) in enumerate(arcs):
        out_arcs[u].append(a)
        in_arcs[w].append(a)
    eq = _Rows()
    for k, cm in enumerate(cs):
        base = k * na
        logical = multi and cm.kind != "legacy"
        for v in g.nodes:
            if logical and v in boxes:
                continue
            coeffs = {base + a: 1.0 for a in out_arcs[v]}
            for a in in_arcs[v]:
                coeffs[base + a] = coeffs.get(base + a, 0.0) - 1.0
            rhs = cm.volume * ((v == cm.src) - (v == cm.dst))
            eq.add(coeffs, rhs)
        if logical:
            # one aggregated row over the box set
            coeffs: dict = {}
            for m in sorted(boxes, key=repr):
                for a in out_arcs[m]:
                    coeffs[base + a] = coeffs.get(base + a, 0.0) + 1.0
                for a in in_arcs[m]:
                    coeffs[base + a] = coeffs.get(base + a, 0.0) - 1.0
            eq.add(coeffs, -cm.volume if cm.kind == "opsec_in" else cm.volume)
    if multi:
        # couple the two halves at every box
        for k in range(len(cs)):
            if cs[k].kind != "opsec_in":
                continue
            b_in, b_out = k * na, (k + 1) * na
            for m in sorted(boxes, key=repr):
                coeffs: dict = {}
                for base in (b_in, b_out):
                    for a in in_arcs[m]:
                        coeffs[base + a] = coeffs.get(base + a, 0.0) + 1.0
                    for a in out_arcs[m]:
                        coeffs[base + a] = coeffs.get(base + a, 0.0) - 1.0
                eq.add(coeffs, 0)
    ub = _Rows()
    for a, e in enumerate(arcs):
        cap = g.cap.get(e)
        if cap is not None and cs:
            ub.add({k * na + a: 1.0 for k in range(len(cs))}, cap)
    A_eq, b_eq = eq.matrix(n)
    A_ub, b_ub = ub.matrix(n)
    c = np.tile(np.array([g.cost[e] for e in arcs], dtype=float), len(cs))
    return RoutingModel(g, cs, arcs, c, A_eq, b_eq, A_ub, b_ub, boxes, multi)


def build_single_box(g, t_l, t_p, m) -> RoutingModel:
    if m is None:
        raise NoBox("no box node given")
    if m in g.external or m not in g.nodes:
        raise NoBox(f"{m!r} is not an internal node")
    return build_model(g, t_l, t_p, {m}, multi=False)


def build_multi_box(g, t_l, t_p, boxes) -> RoutingModel:
    if not boxes:
        raise NoBox("box set is empty")
    return build_model(g, t_l, t_p, boxes, multi=True)


# -- solving -------------------------------------------------------------------

DENSE_LIMIT = 2_000_000  # rows x columns handled by the in-repo solver under "auto"


def _highs(c, A_eq, b_eq, A_ub, b_ub, time_limit: float | None):
    from scipy.optimize import Bounds, LinearConstraint, linprog, milp
    has_eq, has_ub = A_eq.shape[0] > 0, A_ub.shape[0] > 0
    # A basic optimum of the relaxation keeps every commodity on as few paths as
    # the binding capacities allow; when it is integral it is the ILP optimum.
    lp = linprog(c, A_ub=A_ub if has_ub else None, b_ub=b_ub if has_ub else None,
                 A_eq=A_eq if has_eq else None, b_eq=b_eq if has_eq else None,
                 bounds=(0, None), method="highs-ds")
    if lp.status == 2:
        return LpStatus.INFEASIBLE, None, 0, 0
    if lp.status == 0 and np.abs(lp.x - np.rint(lp.x)).max(initial=0) <= 1e-9:
        return LpStatus.OPTIMAL, lp.x, 1, 0
    cons = []
    if has_eq:
        cons.append(LinearConstraint(A_eq, b_eq, b_eq))
    if has_ub:
        cons.append(LinearConstraint(A_ub, -np.inf, b_ub))
    # zero gap: objectives are integral and must be exact
    opts = {"presolve": True, "mip_rel_gap": 0.0}
    if time_limit:
        opts["time_limit"] = time_limit
    res = milp(c, constraints=cons, integrality=np.ones(len(c)), bounds=Bounds(0, np.inf), options=opts)
    if res.status == 0:
        return LpStatus.OPTIMAL, res.x, 1, 1
    if res.status == 2:
        return LpStatus.INFEASIBLE, None, 0, 0
    return LpStatus.ITERATION_LIMIT, None, 0, 0


def _raw(backend, c, A_eq, b_eq, A_ub, b_ub, node_limit, time_limit, use_numba):
    if backend == "simplex":
        r = branch_and_bound(c, A_eq.toarray(), b_eq, A_ub.toarray(), b_ub, node_limit=node_limit,
                             use_numba=use_numba)
        return r.status, r.x, r.nodes, r.branches
    if backend == "highs":
        return _highs(c, A_eq, b_eq, A_ub, b_ub, time_limit)
    raise ValueError(f"unknown backend {backend!r}")


def _integral(x) -> np.ndarray:
    xi = np.rint(x).astype(np.int64)
    if np.abs(x - xi).max(initial=0) > 1e-6 or xi.min(initial=0) < 0:
        raise ArithmeticError("solver returned a non-integral solution")
    return xi


def tie_weights(model: RoutingModel) -> np.ndarray:
    """Secondary link weights in [1, 2), the same for every commodity."""
    u = np.random.default_rng(0x0B5EC).random(len(model.arcs))
    return np.tile(1.0 + u, len(model.commodities))


def solve(model: RoutingModel, backend: str = "auto", node_limit: int = 20_000,
          time_limit: float | None = None, use_numba: bool | None = None,
          tie_break: bool = False) -> FlowSolution:
    """Exact optimum. ``backend``: simplex (in-repo B&B), highs, or auto.

    ``tie_break`` re-solves among the cost-optimal routings for the one that
    is lightest under fixed generic link weights, so every commodity settles
    equal-cost choices the same way. The cost objective is unchanged.
    """
    if not model.commodities:
        return FlowSolution(model, [], 0, backend)
    if backend == "auto":
        size = (model.A_eq.shape[0] + model.A_ub.shape[0]) * model.n_vars
        backend = "simplex" if size <= DENSE_LIMIT else "highs"
    args = (model.A_eq, model.b_eq, model.A_ub, model.b_ub, node_limit, time_limit, use_numba)
    status, x, nodes, branches = _raw(backend, model.c, *args)
    if status is LpStatus.INFEASIBLE:
        raise Infeasible("no routing satisfies the demands within link capacities")
    if status is not LpStatus.OPTIMAL:
        raise IterationLimit(f"solver stopped early ({status.value})")
    xi = _integral(x)
    _check(model, xi)
    cost = np.array([model.graph.cost[e] for e in model.arcs], dtype=np.int64)
    full_cost = np.tile(cost, len(model.commodities))
    obj = int(full_cost @ xi)
    if tie_break:
        A_ub = sparse.vstack([model.A_ub, sparse.csr_matrix(model.c.reshape(1, -1))]).tocsr()
        b_ub = np.concatenate([model.b_ub, [obj]])
        st2, x2, n2, b2 = _raw(backend, tie_weights(model), model.A_eq, model.b_eq, A_ub, b_ub,
                               node_limit, time_limit, use_numba)
        if st2 is LpStatus.OPTIMAL:
            x2i = _integral(x2)
            _check(model, x2i)
            if int(full_cost @ x2i) == obj:
                xi, nodes, branches = x2i, nodes + n2, branches + b2
    na = len(model.arcs)
    flows = []
    for k in range(len(model.commodities)):
        seg = xi[k * na:(k + 1) * na]
        flows.append({model.arcs[a]: int(seg[a]) for a in np.flatnonzero(seg)})
    log.debug("solved %d vars with %s: objective %s", model.n_vars, backend, obj)
    return FlowSolution(model, flows, obj, backend, nodes, branches)


def _check(model: RoutingModel, x: np.ndarray) -> None:
    # exact integer feasibility of the rounded point
    if model.A_eq.shape[0]:
        lhs = model.A_eq.astype(np.int64) @ x
        if not np.array_equal(lhs, model.b_eq.astype(np.int64)):
            raise ArithmeticError("rounded solution violates conservation")
    if model.A_ub.shape[0]:
        lhs = model.A_ub.astype(np.int64) @ x
        if np.any(lhs > np.floor(model.b_ub + 1e-9).astype(np.int64)):
            raise ArithmeticError("rounded solution violates capacity")


def plan_single_box(g, t_l, t_p, m, backend: str = "auto", **kw) -> FlowSolution:
    return solve(build_single_box(g, t_l, t_p, m), backend, **kw)


def plan_multi_box(g, t_l, t_p, boxes, backend: str = "auto", **kw) -> FlowSolution:
    return solve(build_multi_box(g, t_l, t_p, boxes), backend, **kw)
