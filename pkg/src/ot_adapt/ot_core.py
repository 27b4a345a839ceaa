"""Dense entropic optimal transport: Sinkhorn solver, exact oracles, plan queries.

The Sinkhorn inner loop runs in a compiled extension when it is available and
falls back to a numpy implementation otherwise. Set ``OT_ADAPT_BACKEND=python``
to force the fallback.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.special import xlogy

from . import _sinkhorn_py

try:
    if os.environ.get("OT_ADAPT_BACKEND", "").lower() == "python":
        raise ImportError("compiled backend disabled by OT_ADAPT_BACKEND")
    from . import _sinkhorn_ext as _kernel

    BACKEND = "compiled"
except ImportError:
    _kernel = _sinkhorn_py
    BACKEND = "python"

DEFAULT_LAMBDA = 0.1
DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 10_000
# anneal lam from the cost range when range / lam exceeds this; plain Sinkhorn
# contracts too slowly in that regime to hit tight tolerances
EPS_SCALING_RATIO = 10.0
MAX_ORACLE_SIZE = 8


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise transport costs with the domain each axis was drawn from."""

    values: np.ndarray
    row_domain: str = "source"
    col_domain: str = "target"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"cost matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cost matrix has non-finite entries")
        if np.any(v < 0):
            raise ValueError("cost matrix has negative entries")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class TransportPlan:
    coupling: np.ndarray
    lam: float
    iterations_used: int
    marginal_violation: float
    solver: str = "sinkhorn"

    @property
    def shape(self):
        return self.coupling.shape


def _values(cost) -> np.ndarray:
    if isinstance(cost, CostMatrix):
        return cost.values
    v = np.asarray(cost, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {v.shape}")
    return v


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def as_marginal(w, n: int | None = None) -> np.ndarray:
    """Validate a probability vector (nonnegative, sums to 1 within 1e-9)."""
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("marginal must be a non-empty vector")
    if n is not None and w.size != n:
        raise ValueError(f"marginal has length {w.size}, cost axis has {n}")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("marginal entries must be finite and nonnegative")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"marginal sums to {w.sum()!r}, expected 1")
    return w


def sorted_sum(X, axis):
    """Sum along ``axis`` in ascending order; invariant to permutations along it."""
    return np.sort(X, axis=axis).sum(axis=axis)


def marginal_violation(coupling, u1, u2) -> float:
    rows = sorted_sum(coupling, axis=1)
    cols = sorted_sum(coupling, axis=0)
    return float(max(np.max(np.abs(rows - u1)), np.max(np.abs(cols - u2))))


def sinkhorn(cost, u1=None, u2=None, lam=DEFAULT_LAMBDA, tol=DEFAULT_TOL,
             max_iter=DEFAULT_MAX_ITER, eps_scaling=True) -> TransportPlan:
    """Entropic OT plan minimising <C, P> + lam * sum P log P.

    Marginals default to uniform. When the cost range is large relative to
    ``lam`` the solve is warm-started from a sequence of halved regularisation
    levels (epsilon scaling); the fixed point is the same. ``max_iter`` bounds
    the iterations of the final level. Non-convergence is not an error; check
    ``plan.marginal_violation`` against ``tol``.
    """
    C = _values(cost)
    n, m = C.shape
    if not np.all(np.isfinite(C)):
        raise ValueError("cost matrix has non-finite entries")
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam!r}")
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol!r}")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    u1 = uniform(n) if u1 is None else as_marginal(u1, n)
    u2 = uniform(m) if u2 is None else as_marginal(u2, m)
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(u1), np.log(u2)
    f = g = None
    iters = 0
    span = float(C.max() - C.min()) if C.size else 0.0
    if eps_scaling and span > EPS_SCALING_RATIO * lam:
        level = span
        while level > lam:
            f, g, used, _ = _kernel.sinkhorn_log(C, log_a, log_b, level, float(tol), int(max_iter), f, g)
            iters += used
            level = max(level / 2.0, lam)
    f, g, used, _ = _kernel.sinkhorn_log(C, log_a, log_b, float(lam), float(tol), int(max_iter), f, g)
    iters += used
    coupling = np.exp((np.asarray(f)[:, None] + np.asarray(g)[None, :] - C) / lam)
    return TransportPlan(
        coupling=coupling,
        lam=float(lam),
        iterations_used=int(iters),
        marginal_violation=marginal_violation(coupling, u1, u2),
        solver=f"sinkhorn-{BACKEND}",
    )


def exact_ot_oracle(cost):
    """Brute-force OT between uniform marginals of equal size n <= 8.

    Enumerates every permutation coupling (the extreme points of the uniform
    transport polytope). Returns ``(value, perm)`` where ``value`` is
    ``mean_i C[i, perm[i]]``; ties resolve to the lexicographically first
    permutation.
    """
    C = _values(cost)
    n, m = C.shape
    if n != m:
        raise ValueError(f"oracle needs a square cost matrix, got {C.shape}")
    if n > MAX_ORACLE_SIZE:
        raise ValueError(f"oracle limited to n <= {MAX_ORACLE_SIZE}, got {n}")
    best, best_perm = np.inf, None
    rows = range(n)
    for perm in itertools.permutations(rows):
        total = 0.0
        for i in rows:
            total += C[i, perm[i]]
        if total < best:
            best, best_perm = total, perm
    return best / n, np.array(best_perm, dtype=np.intp)


def exact_plan(cost, u1=None, u2=None) -> TransportPlan:
    """Unregularised OT plan.

    Square problems with uniform marginals are solved as an assignment (the
    permutation oracle for n <= 8, Hungarian algorithm beyond); anything else as
    a linear program.
    """
    C = _values(cost)
    n, m = C.shape
    uniform_square = n == m and u1 is None and u2 is None
    if uniform_square:
        if n <= MAX_ORACLE_SIZE:
            _, perm = exact_ot_oracle(C)
            solver = "exact-enumeration"
        else:
            _, perm = linear_sum_assignment(C)
            solver = "exact-assignment"
        coupling = np.zeros((n, n))
        coupling[np.arange(n), perm] = 1.0 / n
        return TransportPlan(coupling, 0.0, 0, 0.0, solver)

    u1 = uniform(n) if u1 is None else as_marginal(u1, n)
    u2 = uniform(m) if u2 is None else as_marginal(u2, m)
    A_rows = np.kron(np.eye(n), np.ones((1, m)))
    A_cols = np.kron(np.ones((1, n)), np.eye(m))
    res = linprog(C.ravel(), A_eq=np.vstack([A_rows, A_cols]), b_eq=np.concatenate([u1, u2]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"exact OT linear program failed: {res.message}")
    coupling = np.clip(res.x.reshape(n, m), 0.0, None)
    return TransportPlan(coupling, 0.0, int(res.nit), marginal_violation(coupling, u1, u2), "exact-lp")


def transport_cost(plan, cost) -> float:
    P = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    C = _values(cost)
    if P.shape != C.shape:
        raise ValueError(f"plan shape {P.shape} does not match cost shape {C.shape}")
    return float(np.sum(C * P))


def plan_entropy(plan) -> float:
    """sum P log P with 0 log 0 = 0 (nonpositive for probability couplings)."""
    P = plan.coupling if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if np.any(np.isnan(P)):
        raise ValueError("plan contains NaN")
    return float(np.sum(xlogy(P, P)))
