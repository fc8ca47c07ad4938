"""ISP graphs, traffic matrices and synthetic topology presets."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    pass


@dataclass
class Graph:
    """Directed links; each undirected topology edge becomes two links."""

    nodes: list
    external: frozenset
    boxes: frozenset = frozenset()
    cost: dict = field(default_factory=dict)  # (u, v) -> cost
    cap: dict = field(default_factory=dict)   # (u, v) -> capacity (None: unbounded)

    def __post_init__(self):
        self.nodes = list(self.nodes)
        self.external = frozenset(self.external)
        self.boxes = frozenset(self.boxes)

    @property
    def internal(self) -> frozenset:
        return frozenset(self.nodes) - self.external

    @property
    def links(self) -> list:
        return list(self.cost)

    def add_edge(self, u, v, cost=1, cap=None, both=True) -> None:
        for a, b in ((u, v), (v, u)) if both else ((u, v),):
            self.cost[(a, b)] = cost
            self.cap[(a, b)] = cap

    def neighbors(self, v) -> list:
        return [b for (a, b) in self.cost if a == v]

    def with_boxes(self, boxes) -> "Graph":
        return Graph(self.nodes, self.external, frozenset(boxes), dict(self.cost), dict(self.cap))

    def with_capacity(self, cap) -> "Graph":
        return Graph(self.nodes, self.external, self.boxes, dict(self.cost), {e: cap for e in self.cost})

    def validate(self) -> None:
        known = set(self.nodes)
        for (u, v), c in self.cost.items():
            if u not in known or v not in known:
                raise GraphError(f"link ({u}, {v}) names an unknown node")
            if c < 0:
                raise GraphError(f"link ({u}, {v}) has negative cost")
            cap = self.cap.get((u, v))
            if cap is not None and cap <= 0:
                raise GraphError(f"link ({u}, {v}) has non-positive capacity")
        if not self.external <= known:
            raise GraphError("external nodes must be graph nodes")
        if self.boxes & self.external:
            raise GraphError("box nodes must be internal")
        if not self.boxes <= known:
            raise GraphError("box nodes must be graph nodes")
        must = self.external | self.boxes
        if must:
            start = next(iter(must))
            seen, stack = {start}, [start]
            adj: dict = {}
            for u, v in self.cost:
                adj.setdefault(u, []).append(v)
                adj.setdefault(v, []).append(u)
            while stack:
                for w in adj.get(stack.pop(), []):
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
            if not must <= seen:
                raise GraphError("external and box nodes are not connected")

    # -- json ---------------------------------------------------------------

    def to_dict(self) -> dict:
        nodes = [{"id": v, "external": v in self.external, "box": v in self.boxes} for v in self.nodes]
        edges, done = [], set()
        for (u, v), c in self.cost.items():
            if (v, u) in done:
                continue
            sym = self.cost.get((v, u)) == c and self.cap.get((v, u)) == self.cap[(u, v)]
            e = {"u": u, "v": v, "cost": c, "capacity": self.cap[(u, v)]}
            if not sym:
                e["directed"] = True
            else:
                done.add((u, v))
            edges.append(e)
        return {"nodes": nodes, "edges": edges}

    @classmethod
    def from_dict(cls, d: dict) -> "Graph":
        try:
            nodes = [n["id"] for n in d["nodes"]]
            g = cls(nodes, {n["id"] for n in d["nodes"] if n.get("external")},
                    {n["id"] for n in d["nodes"] if n.get("box")})
            for e in d["edges"]:
                g.add_edge(e["u"], e["v"], e.get("cost", 1), e.get("capacity"), not e.get("directed", False))
        except (KeyError, TypeError) as exc:
            raise GraphError(f"malformed graph document: {exc}") from None
        g.validate()
        return g


def load_graph(path) -> Graph:
    try:
        return Graph.from_dict(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as exc:
        raise GraphError(f"cannot read graph: {exc}") from None


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=1))


# -- traffic ------------------------------------------------------------------

@dataclass
class TrafficMatrix:
    demands: dict  # (s, t) -> integer volume
    kind: str = "legacy"  # legacy | opsec

    def __post_init__(self):
        for (s, t), vol in self.demands.items():
            if s == t:
                raise GraphError(f"demand ({s}, {t}) has equal endpoints")
            if vol < 0 or int(vol) != vol:
                raise GraphError(f"demand ({s}, {t}) volume {vol} is not a nonnegative integer")
        self.demands = {k: int(v) for k, v in self.demands.items() if v}

    @property
    def total(self) -> int:
        return sum(self.demands.values())


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integers proportional to ``weights`` summing exactly to ``total``."""
    w = np.asarray(weights, dtype=float)
    share = w / w.sum() * total
    base = np.floor(share).astype(np.int64)
    left = int(total - base.sum())
    # ties broken by position so the result is deterministic
    order = np.lexsort((np.arange(len(w)), -(share - base)))
    base[order[:left]] += 1
    return base


def gen_gravity_matrix(g: Graph, total_volume: int, rng, masses=None) -> TrafficMatrix:
    """Gravity model: demand(s, t) proportional to w_s * w_t, masses ~ Exp(1)."""
    ext = sorted(g.external)
    if len(ext) < 2:
        raise GraphError("need at least two external nodes")
    if total_volume <= 0:
        raise GraphError("total volume must be positive")
    w = np.asarray(masses, dtype=float) if masses is not None else rng.exponential(1.0, size=len(ext))
    pairs = [(s, t) for s in ext for t in ext if s != t]
    idx = {v: i for i, v in enumerate(ext)}
    weights = [w[idx[s]] * w[idx[t]] for s, t in pairs]
    vols = largest_remainder(weights, int(total_volume))
    return TrafficMatrix({p: int(v) for p, v in zip(pairs, vols)})


def split_matrix(t: TrafficMatrix, ratio: float) -> tuple[TrafficMatrix, TrafficMatrix]:
    """T^P = round(ratio * T) per demand (halves round up), T^L = T - T^P."""
    p = {k: int(math.floor(ratio * v + 0.5)) for k, v in t.demands.items()}
    return (TrafficMatrix({k: v - p[k] for k, v in t.demands.items()}, "legacy"),
            TrafficMatrix(p, "opsec"))


# -- synthetic topologies -----------------------------------------------------

@dataclass(frozen=True)
class Preset:
    name: str
    nodes: int
    links: int
    capacity: int
    flows: int


# node and link counts, capacities and flow totals of the evaluated ISPs
PRESETS = {
    "gts-ce": Preset("GTS CE", 148, 386, 2000, 1500),
    "telcove": Preset("Telcove (Level 3)", 70, 140, 13200, 1040),
    "columbus": Preset("Columbus Net.", 69, 170, 10000, 1008),
    "missouri": Preset("Missouri Net.", 66, 166, 10000, 915),
    "forthnet": Preset("Forthnet", 61, 124, 6000, 770),
}


def waxman_graph(n: int, links: int, rng, alpha: float = 0.4, beta: float = 0.6, cost=1, cap=None,
                 n_external: int = 8, n_boxes: int = 4) -> Graph:
    """Waxman graph with exactly ``links`` undirected edges, always connected.

    A random spanning tree (each node joins a Waxman-weighted earlier node)
    guarantees connectivity; the rest are drawn without replacement with
    probability proportional to ``beta * exp(-d / (alpha * L))``. External
    nodes are the lowest-degree nodes, boxes the highest-degree internal ones,
    so box sets for different counts are nested.
    """
    if links < n - 1 or links > n * (n - 1) // 2:
        raise GraphError(f"cannot build a connected simple graph with {n} nodes and {links} links")
    pos = rng.random((n, 2))
    d = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    p = beta * np.exp(-d / (alpha * math.sqrt(2)))
    edges = set()
    perm = rng.permutation(n)
    for k in range(1, n):
        v = perm[k]
        cand = perm[:k]
        w = p[v, cand]
        u = cand[rng.choice(k, p=w / w.sum())]
        edges.add((min(u, v), max(u, v)))
    iu, ju = np.triu_indices(n, 1)
    free = np.array([(a, b) not in edges for a, b in zip(iu, ju)])
    iu, ju = iu[free], ju[free]
    w = p[iu, ju]
    extra = links - len(edges)
    if extra:
        pick = rng.choice(len(iu), size=extra, replace=False, p=w / w.sum())
        edges.update((int(iu[k]), int(ju[k])) for k in pick)
    deg = np.zeros(n, dtype=int)
    for a, b in edges:
        deg[a] += 1
        deg[b] += 1
    by_deg = sorted(range(n), key=lambda v: (deg[v], v))
    external = by_deg[:n_external]
    internal = [v for v in reversed(by_deg) if v not in external]
    g = Graph(list(range(n)), external, internal[:n_boxes])
    for a, b in sorted(edges):
        g.add_edge(int(a), int(b), cost, cap)
    g.validate()
    return g


def box_ranking(g: Graph) -> list:
    """Internal nodes, highest degree first (ties by id)."""
    deg = {v: 0 for v in g.nodes}
    for u, _v in g.cost:
        deg[u] += 1
    return sorted(g.internal, key=lambda v: (-deg[v], v))


def preset_graph(name: str, rng, n_external: int = 8, n_boxes: int = 4, capacity=None) -> Graph:
    pr = PRESETS[name]
    return waxman_graph(pr.nodes, pr.links, rng, cap=pr.capacity if capacity is None else capacity,
                        n_external=n_external, n_boxes=n_boxes)


def synthetic_instance(seed: int = 4, nodes: int = 60, links: int = 150, n_external: int = 8,
                       total_volume: int = 12000, n_boxes: int = 4):
    """Waxman topology plus gravity matrix; capacities are filled in by the caller.

    Returns (graph without capacities, matrix, boxes ranked by degree).
    """
    rng = np.random.default_rng(seed)
    g = waxman_graph(nodes, links, rng, cap=None, n_external=n_external, n_boxes=n_boxes)
    t = gen_gravity_matrix(g, total_volume, rng)
    return g, t, box_ranking(g)[:n_boxes]
