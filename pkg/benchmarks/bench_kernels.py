"""Time the compiled kernels against the NumPy fallback.

Usage::

    python3 benchmarks/bench_kernels.py [--points 50000] [--repeat 3]

Both backends are imported directly, so the script needs a built extension.
Each row reports the best of ``--repeat`` runs and checks that the two
backends agree.
"""
import argparse
import time

import numpy as np

from coordfit._kernels import _pykernels

try:
    from coordfit._kernels import _ckernels
except ImportError:
    _ckernels = None


def best_time(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(n_points, rng):
    field = rng.normal(size=(64, 64, 64, 3))
    q = rng.uniform(-1, 64, size=(n_points, 3))
    coeffs = rng.normal(size=(12, 12, 12, 3))
    u = rng.uniform(1, 9, size=(n_points, 3))
    uniforms = rng.random(n_points)
    return {
        "trilinear": lambda k: k.trilinear(field, q),
        "bspline_eval": lambda k: k.bspline_eval(coeffs, u)[0],
        "bspline_eval+grad": lambda k: k.bspline_eval(coeffs, u, True)[1],
        "partial_shuffle": lambda k: k.partial_shuffle(10 * n_points, n_points, uniforms),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=50_000, help="query points per call")
    ap.add_argument("--repeat", type=int, default=3, help="runs per kernel (best is kept)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _ckernels is None:
        raise SystemExit("compiled kernels are not built; run pip install -e . first")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<20}{'cython s':>11}{'python s':>11}{'speedup':>9}  max |diff|")
    for name, call in cases(args.points, rng).items():
        tc, oc = best_time(lambda: call(_ckernels), args.repeat)
        tp, op = best_time(lambda: call(_pykernels), args.repeat)
        diff = float(np.max(np.abs(np.asarray(oc, float) - np.asarray(op, float))))
        print(f"{name:<20}{tc:>11.4f}{tp:>11.4f}{tp / tc:>8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
