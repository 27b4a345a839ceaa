# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled log-domain Sinkhorn kernel.

Same algorithm and return contract as ``_sinkhorn_py.sinkhorn_log``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, fabs, llrint, ldexp, INFINITY, isfinite
from libc.stdlib cimport malloc, free
from libc.stdint cimport int64_t

cnp.import_array()


cdef double _lse_fixed(double* buf, Py_ssize_t k, double scale) noexcept nogil:
    # buf holds the exponents; shifted exponentials lie in [0, 1] and are summed
    # in fixed point, so the result does not depend on the entry order
    cdef Py_ssize_t j
    cdef double mx = -INFINITY
    cdef int64_t acc = 0
    for j in range(k):
        if buf[j] > mx:
            mx = buf[j]
    if not isfinite(mx):
        return mx
    for j in range(k):
        acc += <int64_t>llrint(exp(buf[j] - mx) * scale)
    return mx + log(<double>acc / scale)


cdef int _bit_length(Py_ssize_t k) noexcept nogil:
    cdef int b = 0
    while k > 0:
        b += 1
        k >>= 1
    return b


cdef void _half_step(const double* C, const double* pot_other, const double* log_w,
                     double* out, double* buf, Py_ssize_t rows, Py_ssize_t cols,
                     double lam) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double scale = ldexp(1.0, 62 - _bit_length(cols))
    cdef const double* row
    for i in range(rows):
        row = C + i * cols
        for j in range(cols):
            buf[j] = (pot_other[j] - row[j]) / lam
        out[i] = lam * log_w[i] - lam * _lse_fixed(buf, cols, scale)


def sinkhorn_log(C, log_a, log_b, double lam, double tol, Py_ssize_t max_iter, f0=None, g0=None):
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] Cc = np.ascontiguousarray(C, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2, mode="c"] CT = np.ascontiguousarray(Cc.T)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] la = np.ascontiguousarray(log_a, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] lb = np.ascontiguousarray(log_b, dtype=np.float64)
    cdef Py_ssize_t n = Cc.shape[0], m = Cc.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] f = (
        np.zeros(n) if f0 is None else np.array(f0, dtype=np.float64, order="C"))
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] g = (
        np.zeros(m) if g0 is None else np.array(g0, dtype=np.float64, order="C"))
    cdef cnp.ndarray[cnp.float64_t, ndim=1, mode="c"] f_new = np.zeros(n)
    cdef double* buf = <double*>malloc((n if n > m else m) * sizeof(double))
    cdef double residual = INFINITY, r, ai
    cdef Py_ssize_t it, i, used = max_iter
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for it in range(max_iter + 1):
                _half_step(&Cc[0, 0], &g[0], &la[0], &f_new[0], buf, n, m, lam)
                if it > 0:
                    residual = 0.0
                    for i in range(n):
                        if isfinite(la[i]):
                            ai = exp(la[i])
                            r = fabs(ai * exp((f[i] - f_new[i]) / lam) - ai)
                            if r > residual:
                                residual = r
                    if residual <= tol or it == max_iter:
                        used = it
                        break
                for i in range(n):
                    f[i] = f_new[i]
                _half_step(&CT[0, 0], &f[0], &lb[0], &g[0], buf, m, n, lam)
    finally:
        free(buf)
    return f, g, used, residual
