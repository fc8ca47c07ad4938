"""Threshold scaling of box instances and the per-instance queue model.

Each instance is a single FIFO server with a deterministic per-packet cost
c_p; flows offer Poisson packet streams. Waiting times follow the Lindley
recursion ``d[n] = max(a[n], d[n-1]) + c_p``, which the numba kernel runs
directly and the numpy fallback evaluates in closed form::

    d[n] = (n + 1) * c_p + max_{k <= n} (a[k] - k * c_p)

Times are integer microseconds so both paths agree exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .._accel import HAVE_NUMBA, njit


@dataclass
class ScaleController:
    """instances = max(1, ceil(active / theta)); new flows go to the least-loaded
    instance (lowest id on ties); flows never migrate. ``theta=None`` is static."""

    theta: int | None = 30
    loads: list = field(default_factory=lambda: [0])
    history: list = field(default_factory=list)  # (time, instance count)

    def __post_init__(self):
        if self.theta is not None and self.theta < 1:
            raise ValueError("theta must be >= 1")

    @property
    def active(self) -> int:
        return sum(self.loads)

    def target(self, active: int) -> int:
        if self.theta is None:
            return 1
        return max(1, math.ceil(active / self.theta))

    @property
    def instance_count(self) -> int:
        busy = max((i + 1 for i, n in enumerate(self.loads) if n), default=1)
        return max(self.target(self.active), busy)

    def add_flow(self, now: int = 0) -> int:
        want = self.target(self.active + 1)
        while len(self.loads) < want:
            self.loads.append(0)
        pool = self.loads[:want]
        inst = min(range(len(pool)), key=lambda i: (pool[i], i))
        self.loads[inst] += 1
        self.history.append((now, self.instance_count))
        return inst

    def remove_flow(self, inst: int, now: int = 0) -> None:
        if self.loads[inst] <= 0:
            raise ValueError(f"instance {inst} has no flows")
        self.loads[inst] -= 1
        self.history.append((now, self.instance_count))


def scale_controller(theta: int | None, active_flows: int) -> list[int]:
    """Instance id for each of ``active_flows`` flows admitted one after another."""
    ctl = ScaleController(theta)
    return [ctl.add_flow() for _ in range(active_flows)]


# -- queue kernels ---------------------------------------------------------------

@njit
def _departures_loop(arrivals, cost):
    n = arrivals.shape[0]
    out = np.empty(n, dtype=np.int64)
    last = np.int64(-(2 ** 62))
    for i in range(n):
        a = arrivals[i]
        start = a if a > last else last
        last = start + cost
        out[i] = last
    return out


def _departures_numpy(arrivals, cost):
    idx = np.arange(arrivals.shape[0], dtype=np.int64)
    return cost * (idx + 1) + np.maximum.accumulate(arrivals - cost * idx)


def departures(arrivals, cost: int, use_numba: bool | None = None) -> np.ndarray:
    """FIFO departure times for sorted integer arrivals with fixed service cost."""
    a = np.ascontiguousarray(arrivals, dtype=np.int64)
    if a.size == 0:
        return a.copy()
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        return _departures_loop(a, np.int64(cost))
    return _departures_numpy(a, np.int64(cost))


def sojourn_times(arrivals, cost: int, use_numba: bool | None = None) -> np.ndarray:
    a = np.ascontiguousarray(arrivals, dtype=np.int64)
    return departures(a, cost, use_numba) - a


@dataclass
class InstanceQueue:
    """Event-driven twin of the kernel, used packet by packet inside the simulator."""

    cost: int
    busy_until: int = 0
    served: int = 0

    def serve(self, now: int) -> int:
        start = max(now, self.busy_until)
        self.busy_until = start + self.cost
        self.served += 1
        return self.busy_until


# -- load sweep ------------------------------------------------------------------

def poisson_arrivals(rng, rate_pps: float, duration_us: int) -> np.ndarray:
    n = int(rng.poisson(rate_pps * duration_us / 1e6))
    return np.sort(rng.integers(0, duration_us, size=n)).astype(np.int64)


@dataclass(frozen=True)
class SweepRow:
    flows: int
    mode: str
    theta: int | None
    instances: int
    packets: int
    mean_latency_ms: float
    p95_latency_ms: float
    p95_ratio: float


def load_point(n_flows: int, theta: int | None, rate_pps: float, cost_us: int, duration_us: int,
               rng, use_numba: bool | None = None) -> tuple[int, np.ndarray]:
    """Per-packet latencies (us) with ``n_flows`` concurrent flows."""
    ctl = ScaleController(theta)
    per_inst: dict[int, list] = {}
    for _ in range(n_flows):
        inst = ctl.add_flow()
        per_inst.setdefault(inst, []).append(poisson_arrivals(rng, rate_pps, duration_us))
    lat = []
    for inst in sorted(per_inst):
        arr = np.sort(np.concatenate(per_inst[inst]), kind="stable")
        lat.append(sojourn_times(arr, cost_us, use_numba))
    all_lat = np.concatenate(lat) if lat else np.zeros(0, dtype=np.int64)
    return ctl.instance_count, all_lat


def p95(lat: np.ndarray) -> float:
    # nearest-rank, so the result is an observed latency
    if lat.size == 0:
        return 0.0
    s = np.sort(lat)
    return float(s[max(0, math.ceil(0.95 * s.size) - 1)])


def load_sweep(flow_counts, theta: int | None, rate_pps: float = 100.0, cost_us: int = 50,
               duration_us: int = 2_000_000, rng=None, use_numba: bool | None = None) -> list[SweepRow]:
    """One row per flow count; ``p95_ratio`` is relative to a single flow's p95."""
    rng = rng if rng is not None else np.random.default_rng(0)
    _, base = load_point(1, theta, rate_pps, cost_us, duration_us, rng, use_numba)
    base_p95 = p95(base) or float(cost_us)
    rows = []
    for n in flow_counts:
        inst, lat = load_point(int(n), theta, rate_pps, cost_us, duration_us, rng, use_numba)
        q = p95(lat)
        rows.append(SweepRow(int(n), "static" if theta is None else "dynamic", theta, inst, int(lat.size),
                             float(lat.mean()) / 1000 if lat.size else 0.0, q / 1000, q / base_p95))
    return rows
