"""Pure numpy log-domain Sinkhorn kernel (fallback for the compiled extension)."""

import numpy as np


def _fixed_point_scale(k):
    # 2**(62 - bits(k)) keeps k terms in [0, 1] below the int64 limit
    return float(2 ** (62 - int(k).bit_length()))


def _lse_rows(X):
    """Row-wise log-sum-exp, independent of the order of entries within a row.

    Shifted exponentials lie in [0, 1]; they are rounded to fixed point and
    accumulated as integers, which is associative and so order-free.
    """
    m = X.max(axis=1)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    scale = _fixed_point_scale(X.shape[1])
    E = np.rint(np.exp(X - m_safe[:, None]) * scale).astype(np.int64)
    with np.errstate(divide="ignore"):
        return np.where(np.isfinite(m), m_safe + np.log(E.sum(axis=1) / scale), m)


def sinkhorn_log(C, log_a, log_b, lam, tol, max_iter, f0=None, g0=None):
    """Alternate dual potential updates until the row residual drops below tol.

    Returns ``(f, g, iterations, residual)`` with the plan given by
    ``exp((f_i + g_j - C_ij) / lam)``. Column marginals of the returned pair are
    exact by construction; ``residual`` is the row max-norm residual (``inf``
    when the budget ran out before a check). ``f0``/``g0`` warm-start the
    potentials.
    """
    C = np.ascontiguousarray(C, dtype=np.float64)
    CT = np.ascontiguousarray(C.T)
    n, m = C.shape
    a = np.exp(log_a)
    live = a > 0
    f = np.zeros(n) if f0 is None else np.array(f0, dtype=np.float64)
    g = np.zeros(m) if g0 is None else np.array(g0, dtype=np.float64)
    residual = np.inf
    for it in range(max_iter + 1):
        f_new = lam * log_a - lam * _lse_rows((g[None, :] - C) / lam)
        if it > 0:
            with np.errstate(invalid="ignore", over="ignore"):
                ratio = np.exp((f[live] - f_new[live]) / lam)
            residual = float(np.max(np.abs(a[live] * ratio - a[live]), initial=0.0))
            if residual <= tol or it == max_iter:
                return f, g, it, residual
        f = f_new
        g = lam * log_b - lam * _lse_rows((f[None, :] - CT) / lam)
    return f, g, max_iter, residual
