"""Dense two-phase tableau simplex and depth-first branch and bound.

Meant for desk-scale instances (a few hundred variables). The pivot is the
hot loop; it runs as a numba kernel or as a vectorised numpy rank-1 update
(``OPSEC_NO_NUMBA=1``). Both give the same pivots on the same input.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .._accel import HAVE_NUMBA, njit

TOL = 1e-9
FEAS_TOL = 1e-7
INT_TOL = 1e-6


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


@njit
def _pivot_loop(T, r, c):
    m, n = T.shape
    inv = 1.0 / T[r, c]
    for j in range(n):
        T[r, j] *= inv
    for i in range(m):
        if i == r:
            continue
        f = T[i, c]
        if f != 0.0:
            for j in range(n):
                T[i, j] -= f * T[r, j]
        T[i, c] = 0.0
    T[r, c] = 1.0


def _pivot_numpy(T, r, c):
    T[r] /= T[r, c]
    col = T[:, c].copy()
    col[r] = 0.0
    T -= np.outer(col, T[r])
    T[:, c] = 0.0
    T[r, c] = 1.0


def pivot(T, r: int, c: int, use_numba: bool | None = None) -> None:
    """In-place Gauss-Jordan pivot of tableau ``T`` on (r, c)."""
    if use_numba is None:
        use_numba = HAVE_NUMBA
    if use_numba:
        _pivot_loop(T, r, c)
    else:
        _pivot_numpy(T, r, c)


@dataclass
class LpResult:
    status: LpStatus
    x: np.ndarray | None = None
    objective: float = math.nan
    pivots: int = 0


def _run(T, basis, ncols, max_iter, use_numba, pivots0=0):
    """Iterate on the last row as reduced costs over the first ``ncols`` columns."""
    pivots = pivots0
    stall, best = 0, T[-1, -1]
    m = T.shape[0] - 1
    while True:
        red = T[-1, :ncols]
        if stall > 50:
            # Bland's rule once progress stalls, so degenerate cycling cannot occur
            cand = np.flatnonzero(red < -TOL)
            if cand.size == 0:
                return LpStatus.OPTIMAL, pivots
            c = int(cand[0])
        else:
            c = int(np.argmin(red))
            if red[c] >= -TOL:
                return LpStatus.OPTIMAL, pivots
        col = T[:m, c]
        pos = col > TOL
        if not pos.any():
            return LpStatus.UNBOUNDED, pivots
        ratios = np.full(m, np.inf)
        ratios[pos] = T[:m, -1][pos] / col[pos]
        rmin = ratios.min()
        ties = np.flatnonzero(ratios <= rmin + TOL)
        r = int(ties[np.argmin(basis[ties])])
        pivot(T, r, c, use_numba)
        basis[r] = c
        pivots += 1
        if pivots >= max_iter:
            return LpStatus.ITERATION_LIMIT, pivots
        # the objective cell holds -z, so progress means it grows
        if T[-1, -1] > best + TOL:
            best, stall = T[-1, -1], 0
        else:
            stall += 1


def lp_solve(c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, max_iter: int = 200_000,
             use_numba: bool | None = None) -> LpResult:
    """min c.x  s.t.  A_eq x = b_eq, A_ub x <= b_ub, x >= 0."""
    c = np.asarray(c, dtype=float)
    n = c.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float).reshape(-1, n)
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float).reshape(-1, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    me, mu = A_eq.shape[0], A_ub.shape[0]
    m = me + mu
    # columns: x | slacks | artificials | rhs
    need_art = [i for i in range(me)] + [me + i for i in range(mu) if b_ub[i] < 0]
    na = len(need_art)
    ncols = n + mu + na
    T = np.zeros((m + 1, ncols + 1))
    T[:me, :n] = A_eq
    T[:me, -1] = b_eq
    T[me:m, :n] = A_ub
    T[me:m, n:n + mu] = np.eye(mu)
    T[me:m, -1] = b_ub
    neg = T[:m, -1] < 0
    T[:m][neg] *= -1.0
    basis = np.empty(m, dtype=np.int64)
    for i in range(mu):
        basis[me + i] = n + i
    for k, i in enumerate(need_art):
        T[i, n + mu + k] = 1.0
        basis[i] = n + mu + k
    # phase one: minimise the sum of artificials
    if na:
        T[-1, :] = 0.0
        for i in need_art:
            T[-1, :] -= T[i, :]
        T[-1, n + mu:ncols] = 0.0
        st, piv = _run(T, basis, ncols, max_iter, use_numba)
        if st is LpStatus.ITERATION_LIMIT:
            return LpResult(st, pivots=piv)
        if -T[-1, -1] > FEAS_TOL:
            return LpResult(LpStatus.INFEASIBLE, pivots=piv)
        # drive artificials out of the basis; rows that cannot pivot are redundant
        keep = np.ones(m, dtype=bool)
        for i in range(m):
            if basis[i] >= n + mu:
                row = T[i, :n + mu]
                nz = np.flatnonzero(np.abs(row) > TOL)
                if nz.size:
                    pivot(T, i, int(nz[0]), use_numba)
                    basis[i] = int(nz[0])
                    piv += 1
                else:
                    keep[i] = False
        T = np.vstack([T[:m][keep], T[-1:]])
        basis = basis[keep]
        T = np.hstack([T[:, :n + mu], T[:, -1:]])
        m = basis.size
    else:
        piv = 0
    ncols = n + mu
    T = np.ascontiguousarray(T)
    cost = np.zeros(ncols)
    cost[:n] = c
    T[-1, :] = 0.0
    T[-1, :ncols] = cost
    for i in range(m):
        cb = cost[basis[i]]
        if cb != 0.0:
            T[-1, :] -= cb * T[i, :]
    st, piv = _run(T, basis, ncols, max_iter, use_numba, piv)
    if st is not LpStatus.OPTIMAL:
        return LpResult(st, pivots=piv)
    x = np.zeros(ncols)
    x[basis] = T[:m, -1]
    x = x[:n]
    return LpResult(LpStatus.OPTIMAL, x, float(c @ x), piv)


@dataclass
class MilpResult:
    status: LpStatus
    x: np.ndarray | None = None
    objective: float = math.nan
    nodes: int = 0
    branches: int = 0
    pivots: int = 0


def branch_and_bound(c, A_eq=None, b_eq=None, A_ub=None, b_ub=None, node_limit: int = 20_000,
                     use_numba: bool | None = None) -> MilpResult:
    """All variables integral. Depth-first, most-fractional branching.

    With integral costs the incumbent prunes any node whose LP bound rounds
    up to it.
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.asarray(A_ub, dtype=float).reshape(-1, n)
    b_ub = np.zeros(0) if b_ub is None else np.asarray(b_ub, dtype=float)
    int_cost = bool(np.all(c == np.round(c)))
    best_x, best = None, math.inf
    stack = [[]]  # extra rows as (index, sign, bound): sign*x_j <= bound
    nodes = branches = pivots = 0
    while stack:
        extra = stack.pop()
        nodes += 1
        if nodes > node_limit:
            return MilpResult(LpStatus.ITERATION_LIMIT, best_x, best, nodes, branches, pivots)
        if extra:
            rows = np.zeros((len(extra), n))
            for k, (j, sgn, _b) in enumerate(extra):
                rows[k, j] = sgn
            Au = np.vstack([A_ub, rows])
            bu = np.concatenate([b_ub, [b for _j, _s, b in extra]])
        else:
            Au, bu = A_ub, b_ub
        res = lp_solve(c, A_eq, b_eq, Au, bu, use_numba=use_numba)
        pivots += res.pivots
        if res.status is LpStatus.INFEASIBLE:
            continue
        if res.status is not LpStatus.OPTIMAL:
            return MilpResult(res.status, best_x, best, nodes, branches, pivots)
        bound = math.ceil(res.objective - INT_TOL) if int_cost else res.objective
        if bound >= best - (0 if int_cost else INT_TOL):
            continue
        frac = np.abs(res.x - np.round(res.x))
        j = int(np.argmax(frac))
        if frac[j] <= INT_TOL:
            best_x, best = np.round(res.x), float(c @ np.round(res.x))
            continue
        branches += 1
        v = res.x[j]
        down = extra + [(j, 1.0, math.floor(v))]
        up = extra + [(j, -1.0, -math.ceil(v))]
        # explore the nearer side first
        if v - math.floor(v) < 0.5:
            stack += [up, down]
        else:
            stack += [down, up]
    if best_x is None:
        return MilpResult(LpStatus.INFEASIBLE, nodes=nodes, branches=branches, pivots=pivots)
    return MilpResult(LpStatus.OPTIMAL, best_x, best, nodes, branches, pivots)
