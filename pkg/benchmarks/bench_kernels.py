"""Compare the numba kernels with the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--n 128] [--views 144] [--repeats 5] [--csv out.csv]

The backend is switched through UNROLLCT_BACKEND between runs; outputs of the
two backends are checked against each other before timings are reported.
"""
import argparse
import csv
import os
import statistics
import time

import numpy as np

from unrollct.analytic import fbp_mu
from unrollct.core import Grid, Sinogram, fan_beam, make_shepp_logan
from unrollct.projector import backproject, project


def timed(fn, repeats):
    out = fn()  # warm-up, includes JIT compilation for numba
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return out, statistics.median(ts)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=128)
    ap.add_argument("--views", type=int, default=144)
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args()

    grid = Grid.centered((args.n, args.n), 256.0 / args.n)
    geom = fan_beam(args.views, grid)
    mu = make_shepp_logan(args.n, grid.spacing[0]).mu()
    sino = project(mu, grid, geom)
    kernels = {
        "forward_project": lambda: project(mu, grid, geom),
        "back_project": lambda: backproject(sino, grid, geom),
        "fbp": lambda: fbp_mu(Sinogram(sino, geom), grid),
    }
    rows = []
    saved = os.environ.get("UNROLLCT_BACKEND")
    try:
        results = {}
        for backend in ("numba", "numpy"):
            os.environ["UNROLLCT_BACKEND"] = backend
            for name, fn in kernels.items():
                results[backend, name] = timed(fn, args.repeats)
    finally:
        if saved is None:
            os.environ.pop("UNROLLCT_BACKEND", None)
        else:
            os.environ["UNROLLCT_BACKEND"] = saved

    print(f"grid {args.n}x{args.n}, {args.views} views, median of {args.repeats}")
    print(f"{'kernel':<16}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>10}{'max rel diff':>14}")
    for name in kernels:
        a, ta = results["numba", name]
        b, tb = results["numpy", name]
        diff = float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))
        rows.append((name, ta, tb, tb / ta, diff))
        print(f"{name:<16}{1e3 * ta:>12.2f}{1e3 * tb:>12.2f}{tb / ta:>10.1f}{diff:>14.2e}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["kernel", "numba_s", "numpy_s", "speedup", "max_rel_diff"])
            wr.writerows(rows)


if __name__ == "__main__":
    main()
