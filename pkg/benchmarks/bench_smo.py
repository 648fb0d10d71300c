"""Time the compiled SVR dual solver against the pure-Python fallback.

    python benchmarks/bench_smo.py [--n 200 400 800] [--repeat 3]

Both backends solve the same linear-kernel duals; the script reports wall
time per solve, the speedup and the largest difference between the duals.
"""

import argparse
import time

import numpy as np

from dpfl import _smo_py

try:
    from dpfl import _smo
except ImportError:
    _smo = None


def problem(n, d=10, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.normal(size=(n, d - 1))])
    y = X @ rng.normal(size=d) + 0.05 * rng.normal(size=n)
    return X @ X.T, y


def best_time(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[100, 200, 400])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--omega", type=float, default=0.1)
    ap.add_argument("--eps", type=float, default=0.01)
    args = ap.parse_args(argv)
    if _smo is None:
        print("compiled backend not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'n':>6} {'python [s]':>12} {'cython [s]':>12} {'speedup':>8} {'updates':>8} {'max |da|':>10} {'converged':>9}")
    for n in args.n:
        K, y = problem(n)
        t_py, r_py = best_time(lambda: _smo_py.smo_solve(K, y, args.eps, args.omega), args.repeat)
        t_cy, r_cy = best_time(lambda: _smo.smo_solve(K, y, args.eps, args.omega), args.repeat)
        diff = float(np.abs(r_py[0] - r_cy[0]).max())
        print(f"{n:>6} {t_py:>12.4f} {t_cy:>12.4f} {t_py / t_cy:>8.1f} {r_cy[1]:>8d} {diff:>10.2e} {str(r_cy[4]):>9}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
