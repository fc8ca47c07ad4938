"""Tunnel cost as the Opsec share of traffic grows."""
from __future__ import annotations

import logging
from dataclasses import dataclass

from .graph import Graph, TrafficMatrix, split_matrix
from .model import Infeasible, IterationLimit, plan_multi_box
from .tunnels import decompose_paths

log = logging.getLogger(__name__)

CSV_HEADER = ["ratio", "objective", "tunnels", "baseline", "relative_increase_pct", "status"]


@dataclass(frozen=True)
class SweepPoint:
    ratio: float
    objective: int | None
    tunnels: int | None
    baseline: int | None
    relative_increase_pct: float | None
    status: str  # optimal | infeasible | iteration_limit

    def row(self) -> list:
        blank = lambda v: "" if v is None else v
        pct = "" if self.relative_increase_pct is None else f"{self.relative_increase_pct:.4f}"
        return [f"{self.ratio:g}", blank(self.objective), blank(self.tunnels), blank(self.baseline), pct, self.status]


def sweep_opsec_ratio(g: Graph, t: TrafficMatrix, ratios, boxes, rng=None, backend: str = "auto",
                      tie_break: bool = True, **solve_kw) -> list[SweepPoint]:
    """One row per ratio; infeasible rows are marked and the sweep goes on.

    ``rng`` is accepted for interface symmetry; the split is deterministic.
    """
    rows = []
    for rho in ratios:
        t_l, t_p = split_matrix(t, float(rho))
        try:
            sol = plan_multi_box(g, t_l, t_p, boxes, backend, tie_break=tie_break, **solve_kw)
        except Infeasible:
            rows.append(SweepPoint(float(rho), None, None, None, None, "infeasible"))
            continue
        except IterationLimit:
            rows.append(SweepPoint(float(rho), None, None, None, None, "iteration_limit"))
            continue
        rep = decompose_paths(sol)
        rows.append(SweepPoint(float(rho), sol.objective, rep.tunnels, rep.baseline,
                               100.0 * rep.relative_increase, "optimal"))
    if not is_monotone(rows):
        log.warning("tunnel counts are not monotone in the Opsec ratio: %s", [r.tunnels for r in rows])
    return rows


def is_monotone(rows) -> bool:
    vals = [r.tunnels for r in rows if r.tunnels is not None]
    return all(a <= b for a, b in zip(vals, vals[1:]))


def parse_ratios(spec: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma list; empty string gives no ratios."""
    spec = spec.strip()
    if not spec:
        return []
    if ":" in spec:
        a, b, step = (float(x) for x in spec.split(":"))
        if step <= 0:
            raise ValueError("ratio step must be positive")
        n = int(round((b - a) / step))
        out = [round(a + k * step, 10) for k in range(n + 1)]
        return [r for r in out if r <= b + 1e-12]
    return [float(x) for x in spec.split(",") if x.strip()]


def calibrate_capacity(g: Graph, t: TrafficMatrix, backend: str = "auto") -> int:
    """Uniform link capacity equal to the busiest link of the legacy-only routing.

    Legacy routing at ratio 0 then just fits, and Opsec detours have to
    compete for the slack instead of spreading freely.
    """
    sol = plan_multi_box(g.with_capacity(None), t, TrafficMatrix({}, "opsec"), sorted(g.boxes, key=repr)[:1] or
                         sorted(g.internal, key=repr)[:1], backend, tie_break=True)
    load = sol.link_load()
    return max(load.values()) if load else 1
