"""Independent reference computations used by the tests.

Nothing here touches the package's solvers or queue kernels.
"""
from __future__ import annotations

import math

import networkx as nx


# -- routing ------------------------------------------------------------------

def to_nx(g) -> nx.DiGraph:
    d = nx.DiGraph()
    d.add_nodes_from(g.nodes)
    for (u, v), c in g.cost.items():
        d.add_edge(u, v, weight=c)
    return d


def dijkstra_sum(g, demands: dict) -> int:
    d = to_nx(g)
    return sum(vol * nx.shortest_path_length(d, s, t, weight="weight") for (s, t), vol in demands.items())


def _arcs(path):
    return tuple(zip(path, path[1:]))


def _paths(d, s, t):
    out = []
    for p in nx.all_simple_paths(d, s, t):
        a = _arcs(p)
        out.append((sum(d.edges[e]["weight"] for e in a), a))
    return out


def unit_options(g, t_l: dict, t_p: dict, boxes) -> list:
    """Per demand: (volume, sorted [(cost, arcs)]) over every admissible unit route.

    A legacy unit takes any simple s-t path. An Opsec unit picks a box m and
    any simple s-m path followed by any simple m-t path.
    """
    d = to_nx(g)
    demands = []
    for (s, t), v in sorted(t_l.items(), key=repr):
        demands.append((v, sorted(_paths(d, s, t))))
    for (s, t), v in sorted(t_p.items(), key=repr):
        opts = []
        for m in sorted(boxes, key=repr):
            ins, outs = _paths(d, s, m), _paths(d, m, t)
            opts += [(ci + co, ai + ao) for ci, ai in ins for co, ao in outs]
        demands.append((v, sorted(opts)))
    return demands


def enumerate_optimum(g, t_l: dict, t_p: dict, boxes):
    """Minimum total cost over all integral unit-route assignments, or None.

    Exhaustive depth-first search; units of one demand take options in
    non-decreasing index order (they are interchangeable) and a node is cut
    only when even the cheapest completion cannot beat the incumbent.
    """
    demands = unit_options(g, t_l, t_p, boxes)
    units = []
    for k, (v, opts) in enumerate(demands):
        if v and not opts:
            return None
        units += [k] * v
    cap = {e: c for e, c in g.cap.items() if c is not None}
    floor = [demands[k][1][0][0] for k in units]
    rest = [sum(floor[i:]) for i in range(len(units) + 1)]
    load: dict = {}
    best = [math.inf]

    def dfs(i, cost, lo):
        if cost + rest[i] >= best[0]:
            return
        if i == len(units):
            best[0] = cost
            return
        k = units[i]
        start = lo if i and units[i - 1] == k else 0
        for j in range(start, len(demands[k][1])):
            c, arcs = demands[k][1][j]
            if cost + c + rest[i + 1] >= best[0]:
                break
            ok = True
            for e in arcs:
                load[e] = load.get(e, 0) + 1
                if e in cap and load[e] > cap[e]:
                    ok = False
            if ok:
                dfs(i + 1, cost + c, j)
            for e in arcs:
                load[e] -= 1

    dfs(0, 0, 0)
    return None if best[0] == math.inf else best[0]


def closed_form_opsec(g, pairs: dict, boxes) -> int:
    """Uncapacitated Opsec cost: each unit goes via the best box."""
    d = to_nx(g)
    dist = dict(nx.all_pairs_dijkstra_path_length(d, weight="weight"))
    return sum(v * min(dist[s][m] + dist[m][t] for m in boxes) for (s, t), v in pairs.items())


# -- queueing -----------------------------------------------------------------

def md1_wait_cdf(x: float, lam: float, d: float) -> float:
    """Erlang's M/D/1 waiting-time distribution P(W <= x), rho = lam*d < 1."""
    rho = lam * d
    if x < 0:
        return 0.0
    total = 0.0
    for k in range(int(math.floor(x / d)) + 1):
        y = lam * (k * d - x)
        total += y ** k / math.factorial(k) * math.exp(-y)
    return (1 - rho) * total


def md1_sojourn_quantile(q: float, lam: float, d: float, step: float = 1e-3) -> float:
    """Smallest sojourn time s = W + d with P(W <= s - d) >= q (units of d)."""
    if lam * d >= 1:
        return math.inf
    x = 0.0
    while md1_wait_cdf(x, lam, d) < q:
        x += step * d
    return x + d
