"""Seeded random routing instances small enough for the enumeration oracle."""
from __future__ import annotations

import numpy as np

from opsec.routing import Graph, TrafficMatrix


def random_instance(seed: int, max_nodes: int = 8, tight=None):
    """(graph, T^L dict, T^P dict, boxes) with |V| <= max_nodes, <= 3 demands, volumes <= 3."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, max_nodes + 1))
    tight = bool(rng.integers(2)) if tight is None else tight
    g = Graph(list(range(n)), [0, 1, 2][: min(3, n - 1)])
    # spanning tree plus a few chords keeps simple-path counts enumerable
    for v in range(1, n):
        u = int(rng.integers(v))
        g.add_edge(u, v, int(rng.integers(1, 4)), int(rng.integers(1, 4)) if tight else None)
    for _ in range(int(rng.integers(0, 3))):
        u, v = (int(x) for x in rng.choice(n, 2, replace=False))
        if (u, v) not in g.cost:
            g.add_edge(u, v, int(rng.integers(1, 4)), int(rng.integers(1, 4)) if tight else None)
    internal = sorted(g.internal)
    k = int(rng.integers(1, min(2, len(internal)) + 1))
    boxes = sorted(int(x) for x in rng.choice(internal, k, replace=False))
    g = g.with_boxes(boxes)
    ext = sorted(g.external)
    pairs = [(s, t) for s in ext for t in ext if s != t]
    pick = rng.choice(len(pairs), int(rng.integers(1, 4)), replace=False)
    t_l, t_p = {}, {}
    for i in pick:
        vol = int(rng.integers(1, 4))
        (t_p if rng.integers(2) else t_l)[pairs[i]] = vol
    return g, t_l, t_p, boxes


def matrices(t_l: dict, t_p: dict):
    return TrafficMatrix(dict(t_l), "legacy"), TrafficMatrix(dict(t_p), "opsec")
