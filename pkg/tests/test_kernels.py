import os
import subprocess
import sys

import numpy as np
import pytest

from opsec._accel import HAVE_NUMBA
from opsec.netsim.scaling import departures, poisson_arrivals
from opsec.routing.simplex import branch_and_bound, lp_solve, pivot

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not importable")


def lindley(arr, cost):
    # textbook recursion, kept deliberately naive
    out, last = [], None
    for a in arr:
        start = a if last is None or a > last else last
        last = start + cost
        out.append(last)
    return out


@pytest.mark.parametrize("use_numba", [False, pytest.param(True, marks=needs_numba)])
def test_departures_match_recursion(use_numba):
    rng = np.random.default_rng(0)
    for n in (0, 1, 7, 500):
        arr = np.sort(rng.integers(0, 5_000, n))
        assert departures(arr, 13, use_numba).tolist() == lindley(arr.tolist(), 13)


@needs_numba
def test_departures_backends_agree():
    arr = poisson_arrivals(np.random.default_rng(1), 20_000.0, 1_000_000)
    assert np.array_equal(departures(arr, 50, True), departures(arr, 50, False))


@needs_numba
def test_pivot_backends_agree():
    rng = np.random.default_rng(2)
    for _ in range(20):
        T = rng.normal(size=(6, 9))
        a, b = T.copy(), T.copy()
        r, c = int(rng.integers(6)), int(rng.integers(9))
        pivot(a, r, c, True)
        pivot(b, r, c, False)
        assert np.allclose(a, b, atol=1e-12)
        assert a[r, c] == 1.0 and np.all(np.delete(a[:, c], r) == 0)


@pytest.mark.parametrize("use_numba", [False, pytest.param(True, marks=needs_numba)])
def test_lp_and_milp_small(use_numba):
    # max x + y s.t. 2x + 2y <= 3, x, y >= 0  -> LP 1.5, MILP 1
    c = np.array([-1.0, -1.0])
    lp = lp_solve(c, A_ub=np.array([[2.0, 2.0]]), b_ub=np.array([3.0]), use_numba=use_numba)
    assert lp.objective == pytest.approx(-1.5)
    mi = branch_and_bound(c, A_ub=np.array([[2.0, 2.0]]), b_ub=np.array([3.0]), use_numba=use_numba)
    assert mi.objective == pytest.approx(-1.0) and mi.branches >= 1


def test_numpy_fallback_subprocess():
    env = dict(os.environ, OPSEC_NO_NUMBA="1")
    code = ("from opsec._accel import HAVE_NUMBA, backend; "
            "from opsec.routing import plan_multi_box, TrafficMatrix, Graph; "
            "g = Graph(['s','a','t','m'], {'s','t'}, {'m'}); "
            "[g.add_edge(u, v) for u, v in [('s','a'),('a','t'),('a','m')]]; "
            "e = TrafficMatrix({}, 'opsec'); "
            "print(HAVE_NUMBA, backend(), plan_multi_box(g, e, TrafficMatrix({('s','t'): 1}, 'opsec'), ['m'], 'simplex').objective)")
    p = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert p.returncode == 0, p.stderr
    assert p.stdout.split() == ["False", "numpy", "4"]
