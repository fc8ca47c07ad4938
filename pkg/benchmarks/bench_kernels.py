"""Time the numeric kernels on both backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per (kernel, backend) with the best wall time. The numba
rows are skipped when numba is not importable or OPSEC_NO_NUMBA is set.
"""
import argparse
import time

import numpy as np

from opsec._accel import HAVE_NUMBA
from opsec.netsim.scaling import departures, load_sweep, poisson_arrivals
from opsec.routing import TrafficMatrix, plan_multi_box, split_matrix, synthetic_instance
from opsec.routing.simplex import pivot


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernels():
    arr = poisson_arrivals(np.random.default_rng(0), 20_000.0, 2_000_000)   # ~ 40k packets
    T = np.random.default_rng(1).normal(size=(400, 900))
    g, t, ranked = synthetic_instance(4, nodes=20, links=40, n_external=4, total_volume=400, n_boxes=2)
    t_l, t_p = split_matrix(t, 0.3)
    return {
        "departures (40k pkts)": lambda nb: departures(arr, 50, nb),
        "pivot (400x900)": lambda nb: pivot(T.copy(), 3, 7, nb),
        "load_sweep (10..200 flows)": lambda nb: load_sweep(range(10, 201, 10), 30, use_numba=nb),
        "simplex ILP (20 nodes)": lambda nb: plan_multi_box(g, t_l, t_p, ranked, "simplex", use_numba=nb),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = [("numpy", False)] + ([("numba", True)] if HAVE_NUMBA else [])
    for name, fn in kernels().items():
        for label, nb in backends:
            fn(nb)  # warm up (compile)
            print(f"{name:<28} {label:<6} {best_of(lambda: fn(nb), args.repeat) * 1e3:10.2f} ms")


if __name__ == "__main__":
    main()
