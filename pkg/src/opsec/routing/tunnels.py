"""Flow decomposition into end-to-end tunnels."""
from __future__ import annotations

from dataclasses import dataclass, field

from .model import FlowSolution


class NonConservative(ArithmeticError):
    """A flow does not decompose cleanly; points at a solver bug."""


@dataclass
class TunnelReport:
    paths: dict            # (s, t) -> {path tuple: volume}
    tunnels: int
    baseline: int          # one tunnel per active direction of every external pair
    opsec_paths: dict = field(default_factory=dict)  # (s, t) -> {path: volume}, Opsec only

    @property
    def relative_increase(self) -> float:
        return (self.tunnels - self.baseline) / self.baseline if self.baseline else 0.0


def _cancel_cycles(f: dict) -> dict:
    f = {a: v for a, v in f.items() if v > 0}
    while True:
        adj: dict = {}
        for (u, w) in f:
            adj.setdefault(u, []).append(w)
        for k in adj:
            adj[k].sort(key=repr)
        cycle = None
        color: dict = {}
        for start in sorted(adj, key=repr):
            if color.get(start):
                continue
            stack, onpath = [(start, iter(adj.get(start, [])))], [start]
            color[start] = 1
            while stack and cycle is None:
                v, it = stack[-1]
                nxt = next(it, None)
                if nxt is None:
                    color[v] = 2
                    stack.pop()
                    onpath.pop()
                elif color.get(nxt) == 1:
                    cycle = onpath[onpath.index(nxt):] + [nxt]
                elif not color.get(nxt):
                    color[nxt] = 1
                    stack.append((nxt, iter(adj.get(nxt, []))))
                    onpath.append(nxt)
            if cycle:
                break
        if cycle is None:
            return f
        arcs = list(zip(cycle, cycle[1:]))
        d = min(f[a] for a in arcs)
        for a in arcs:
            f[a] -= d
            if not f[a]:
                del f[a]


def decompose_flow(flow: dict) -> list[tuple[tuple, int]]:
    """Paths (node tuples) with volumes; cycles are cancelled first."""
    f = _cancel_cycles(flow)
    excess: dict = {}
    for (u, w), v in f.items():
        excess[u] = excess.get(u, 0) + v
        excess[w] = excess.get(w, 0) - v
    out = []
    while f:
        srcs = sorted((v for v, e in excess.items() if e > 0), key=repr)
        if not srcs:
            raise NonConservative("positive flow left with no source")
        path = [srcs[0]]
        while excess.get(path[-1], 0) >= 0 or len(path) == 1:
            nxt = sorted((w for (u, w) in f if u == path[-1]), key=repr)
            if not nxt:
                break
            path.append(nxt[0])
        if excess.get(path[-1], 0) >= 0:
            raise NonConservative(f"path {path} ends at a node without deficit")
        arcs = list(zip(path, path[1:]))
        d = min([f[a] for a in arcs] + [excess[path[0]], -excess[path[-1]]])
        for a in arcs:
            f[a] -= d
            if not f[a]:
                del f[a]
        excess[path[0]] -= d
        excess[path[-1]] += d
        out.append((tuple(path), d))
    if any(excess.values()):
        raise NonConservative("flow excess left after decomposition")
    return out


def _join(ins: list, outs: list, boxes) -> list[tuple[tuple, int]]:
    """Pair inbound paths ending at a box with outbound paths leaving it."""
    outs = [[p, v] for p, v in outs]
    joined = []
    for p, v in ins:
        if not (set(p) & boxes):
            raise NonConservative(f"Opsec path {p} visits no box")
        for q in outs:
            if v == 0:
                break
            if q[1] and q[0][0] == p[-1]:
                d = min(v, q[1])
                joined.append((p + q[0][1:], d))
                v -= d
                q[1] -= d
        if v:
            joined.append((p, v))
    for q, v in outs:
        if not (set(q) & boxes):
            raise NonConservative(f"Opsec path {q} visits no box")
        if v:
            joined.append((q, v))
    return joined


def decompose_paths(sol: FlowSolution) -> TunnelReport:
    boxes = sol.model.boxes
    paths: dict = {}
    opsec: dict = {}
    for (s, t), f in sol.legacy().items():
        for p, v in decompose_flow(f):
            if p[0] != s or p[-1] != t:
                raise NonConservative(f"legacy path {p} does not join {s} and {t}")
            paths.setdefault((s, t), {})
            paths[(s, t)][p] = paths[(s, t)].get(p, 0) + v
    for (s, t), (fin, fout) in sol.opsec().items():
        for p, v in _join(decompose_flow(fin or {}), decompose_flow(fout or {}), boxes):
            opsec.setdefault((s, t), {})
            opsec[(s, t)][p] = opsec[(s, t)].get(p, 0) + v
            paths.setdefault((s, t), {})
            paths[(s, t)][p] = paths[(s, t)].get(p, 0) + v
    tunnels = sum(len(v) for v in paths.values())
    return TunnelReport(paths, tunnels, len(paths), opsec)
