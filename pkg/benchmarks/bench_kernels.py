#!/usr/bin/env python3
"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py --size 256 --runs 20

The first numba call includes JIT compilation (or a cache load) and is
reported separately.
"""
import argparse
import json
import time

import numpy as np

from vlur import _kernels as K
from vlur.metrics import gaussian_kernel


def _time(fn, runs):
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * float(np.median(times))


def cases(size, seed=0):
    rng = np.random.default_rng(seed)
    n_streaks = int(0.01 * size * size)
    ang = np.deg2rad(rng.uniform(-25, 25, n_streaks))
    rain = (size, size, rng.uniform(0, size, n_streaks), rng.uniform(-12, size, n_streaks),
            np.sin(ang), np.cos(ang), rng.uniform(5, 12, n_streaks), rng.uniform(0.5, 0.9, n_streaks))
    n_flakes = int(0.008 * size * size)
    snow = (size, size, rng.uniform(0, size, n_flakes), rng.uniform(0, size, n_flakes),
            rng.uniform(0.8, 1.8, n_flakes), rng.uniform(0.7, 1.0, n_flakes))
    filt = (rng.random((size, size)), gaussian_kernel(11, 1.5))
    return {"rain_alpha": rain, "snow_alpha": snow, "gaussian_filter_valid": filt}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    if not K._HAVE_NUMBA:
        raise SystemExit("numba is not installed; only the numpy path is available")

    rows = []
    for name, argv in cases(args.size).items():
        py = getattr(K, f"{name}_numpy")
        nb = getattr(K, f"{name}_numba")
        t0 = time.perf_counter()
        ref = nb(*argv)
        first = 1e3 * (time.perf_counter() - t0)
        diff = float(np.max(np.abs(ref - py(*argv))))
        t_np = _time(lambda: py(*argv), args.runs)
        t_nb = _time(lambda: nb(*argv), args.runs)
        rows.append({"kernel": name, "size": args.size, "numpy_ms": t_np, "numba_ms": t_nb,
                     "speedup": t_np / t_nb, "first_call_ms": first, "max_abs_diff": diff})

    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"{'kernel':<24} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8} {'1st call':>9} {'max |diff|':>11}")
    for r in rows:
        print(f"{r['kernel']:<24} {r['numpy_ms']:10.3f} {r['numba_ms']:10.3f} {r['speedup']:8.1f}x "
              f"{r['first_call_ms']:8.0f} {r['max_abs_diff']:11.2e}")


if __name__ == "__main__":
    main()
