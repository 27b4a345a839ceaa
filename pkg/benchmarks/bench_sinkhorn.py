"""Time the compiled Sinkhorn kernel against the numpy fallback.

Both kernels are called directly on the same log-domain problem, so the
comparison excludes the epsilon-scaling driver around them. Prints one row per
(size, lambda) with median wall time and the max plan difference between the
two backends.

    python3 benchmarks/bench_sinkhorn.py --sizes 16 64 256 --repeats 5
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from ot_adapt import _sinkhorn_py

try:
    from ot_adapt import _sinkhorn_ext
except ImportError:  # extension not built
    _sinkhorn_ext = None


def _problem(n, seed):
    rng = np.random.default_rng(seed)
    C = rng.random((n, n))
    log_u = np.full(n, -np.log(n))
    return C, log_u


def _time(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)), out


def _plan(C, f, g, lam):
    return np.exp((f[:, None] + g[None, :] - C) / lam)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[16, 64, 256])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.1, 0.05])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--max-iter", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if _sinkhorn_ext is None:
        print("compiled extension not available; build with `pip install -e . --no-build-isolation`")
    print(f"{'n':>5} {'lam':>6} {'iters':>6} {'python_ms':>10} {'compiled_ms':>12} {'speedup':>8} {'max_diff':>9}")
    for n in args.sizes:
        C, log_u = _problem(n, args.seed)
        for lam in args.lambdas:
            def run(mod):
                return mod.sinkhorn_log(C, log_u, log_u, lam, 1e-9, args.max_iter)

            t_py, (f, g, iters, _) = _time(lambda: run(_sinkhorn_py), args.repeats)
            row = f"{n:>5} {lam:>6g} {iters:>6} {1e3 * t_py:>10.3f}"
            if _sinkhorn_ext is not None:
                t_c, (fc, gc, _, _) = _time(lambda: run(_sinkhorn_ext), args.repeats)
                diff = np.abs(_plan(C, f, g, lam) - _plan(C, fc, gc, lam)).max()
                row += f" {1e3 * t_c:>12.3f} {t_py / t_c:>8.1f} {diff:>9.1e}"
            print(row)


if __name__ == "__main__":
    main()
