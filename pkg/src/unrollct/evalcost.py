"""Image-quality metrics and the training-cost model.

SSIM follows the standard Gaussian-window definition on liver-window
clamped images; the cost model is the 8-term multilinear form
``sum c_ijk N^i Np^j Nz^k`` fitted by least squares.
"""
from __future__ import annotations

import csv
import gc
import itertools
import math
import statistics
import time
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import stats

from .core import Grid, Image, fan_beam
from .errors import ContractViolation, InvalidArgument
from .nn.adam import AdamState, adam_step
from .nn.unet import (Cache, UNetSpec, featuremap_bytes, init_params, unet_backward,
                      unet_residual)
from .projector import backproject, project

LIVER_WINDOW = (-160.0, 240.0)


def _arr(a) -> np.ndarray:
    return np.asarray(a.data if isinstance(a, Image) else a, dtype=np.float64)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")


def rmse(a, b) -> float:
    """Root mean squared difference in HU."""
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    d = a - b
    return float(np.sqrt(np.mean(d * d)))


# --------------------------------------------------------------------------
# SSIM
# --------------------------------------------------------------------------

def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-t * t / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    """Separable weighted sum over every fully contained window."""
    k = g.size
    out = sliding_window_view(img, k, axis=0) @ g
    return sliding_window_view(out, k, axis=1) @ g


def ssim_map(a, b, data_range: float, k1: float = 0.01, k2: float = 0.03, size: int = 11,
             sigma: float = 1.5) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    _same_shape(a, b)
    if a.ndim != 2 or min(a.shape) < size:
        raise InvalidArgument(f"SSIM needs 2-D images of at least {size}x{size}")
    g = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / \
        ((mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2))


def ssim_liver(a, ref, window=LIVER_WINDOW) -> float:
    """Mean SSIM after clamping both images to the liver window.

    Values are shifted so the window maps to [0, L] with L its width. 3-D
    volumes are scored slice by slice along the last axis and averaged.
    """
    a, r = _arr(a), _arr(ref)
    _same_shape(a, r)
    lo, hi = window
    a = np.clip(a, lo, hi) - lo
    r = np.clip(r, lo, hi) - lo
    L = hi - lo
    if a.ndim == 2:
        return float(np.mean(ssim_map(a, r, L)))
    return float(np.mean([np.mean(ssim_map(a[..., z], r[..., z], L)) for z in range(a.shape[-1])]))


def per_slice_metrics(a, ref):
    """(rmse list, ssim list) over axial slices; a 2-D image counts as one slice."""
    a, r = _arr(a), _arr(ref)
    _same_shape(a, r)
    if a.ndim == 2:
        return [rmse(a, r)], [ssim_liver(a, r)]
    zs = range(a.shape[-1])
    return [rmse(a[..., z], r[..., z]) for z in zs], [ssim_liver(a[..., z], r[..., z]) for z in zs]


# --------------------------------------------------------------------------
# paired confidence interval
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Interval:
    mean: float
    low: float
    high: float
    n: int
    level: float

    def __str__(self):
        return f"mean={self.mean:.6g} ci{100 * self.level:g}=[{self.low:.6g}, {self.high:.6g}] n={self.n}"


def ci_difference(x_a: Sequence[float], x_b: Sequence[float], level: float = 0.95) -> Interval:
    """Paired-t interval for the mean of ``D = x_a - x_b``."""
    a = np.asarray(x_a, dtype=np.float64)
    b = np.asarray(x_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidArgument("paired samples must be 1-D and the same length")
    n = a.size
    if n < 2:
        raise InvalidArgument("need at least 2 paired samples")
    if not 0 < level < 1:
        raise InvalidArgument("level must lie in (0, 1)")
    d = a - b
    m = float(np.mean(d))
    half = float(stats.t.ppf(0.5 + level / 2, n - 1) * np.std(d, ddof=1) / math.sqrt(n))
    return Interval(m, m - half, m + half, n, level)


# --------------------------------------------------------------------------
# complexity ratios
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ComplexityInputs:
    Nx: int
    Ny: int
    Nz: int
    Npx: int
    Npy: int
    Npz: int
    Nf: int
    NfR: int
    Nc: int
    N: int
    Nb: int
    Nu: int
    Nv: int
    Np: int

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise InvalidArgument(f"{f.name} must be >= 1")

    @property
    def patch_volume(self) -> int:
        return self.Npx * self.Npy * self.Npz

    @property
    def image_volume(self) -> int:
        return self.Nx * self.Ny * self.Nz


def volume_factor(inp: ComplexityInputs) -> float:
    """How many patches fit in the image volume."""
    return inp.image_volume / inp.patch_volume


def memory_ratio(inp: ComplexityInputs) -> float:
    """Greedy-patch over unrolled-network training memory, unit constants."""
    return inp.patch_volume / inp.image_volume * inp.Nf / (inp.NfR * inp.N)


def time_ratio(inp: ComplexityInputs) -> float:
    """Greedy-patch over unrolled-network time per iteration: a CNN term plus a
    term set against the unrolled network's projector work."""
    cnn = inp.patch_volume / inp.image_volume * inp.Nf / inp.NfR * inp.Nb
    proj = inp.patch_volume / ((inp.Nx + inp.Ny + inp.Nz) * inp.Nu * inp.Nv * inp.Np) * inp.Nf * inp.Nb
    return cnn + proj


# --------------------------------------------------------------------------
# multilinear cost model
# --------------------------------------------------------------------------

TERMS = tuple(itertools.product((0, 1), repeat=3))   # (i, j, k) exponents of N, Np, Nz


def _design(N, Np, Nz) -> np.ndarray:
    N, Np, Nz = (np.asarray(v, dtype=np.float64) for v in (N, Np, Nz))
    return np.stack([N ** i * Np ** j * Nz ** k for i, j, k in TERMS], axis=-1)


@dataclass(frozen=True)
class CostModel:
    coef: tuple          # c_ijk in TERMS order
    r2: float
    n_samples: int

    def predict(self, N, Np, Nz):
        out = _design(N, Np, Nz) @ np.asarray(self.coef)
        return float(out) if np.ndim(out) == 0 else out

    def describe(self) -> str:
        lines = ["cost = sum_ijk c_ijk * N^i * Np^j * Nz^k"]
        for (i, j, k), c in zip(TERMS, self.coef):
            lines.append(f"c_{i}{j}{k} = {c:.6g}")
        lines.append(f"r2 = {self.r2:.6f} (n={self.n_samples})")
        return "\n".join(lines)


def fit_cost_model(samples) -> CostModel:
    """Least-squares fit over rows ``(N, Np, Nz, cost)``."""
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 4:
        raise InvalidArgument("samples must be rows of (N, Np, Nz, cost)")
    if s.shape[0] < len(TERMS):
        raise InvalidArgument(f"need at least {len(TERMS)} samples, got {s.shape[0]}")
    X = _design(s[:, 0], s[:, 1], s[:, 2])
    for name, col in (("N", 0), ("Np", 1), ("Nz", 2)):
        if np.unique(s[:, col]).size < 2:
            raise InvalidArgument(f"rank-deficient design: {name} takes a single value")
    rank = np.linalg.matrix_rank(X)
    if rank < len(TERMS):
        raise InvalidArgument(f"rank-deficient design: rank {rank} < {len(TERMS)}")
    y = s[:, 3]
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return CostModel(tuple(float(c) for c in coef), r2, s.shape[0])


# --------------------------------------------------------------------------
# measured costs
# --------------------------------------------------------------------------

def _median_time(fn, repeats: int = 5) -> float:
    fn()  # warm-up (JIT, caches)
    ts = []
    # as timeit does: cyclic GC pauses scale with whatever else the process holds
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            ts.append(time.perf_counter() - t0)
    finally:
        if was_enabled:
            gc.enable()
    return statistics.median(ts)


def measure_training_cost(spec: UNetSpec, patch, minibatch: int = 1, repeats: int = 5,
                          seed: int = 0):
    """Greedy trainer cost: (featuremap cache bytes of one patch, median seconds
    per optimizer step over a minibatch). Bytes do not depend on the minibatch
    because gradients are accumulated patch by patch."""
    shape = (patch,) * spec.ndim if np.isscalar(patch) else tuple(patch)
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    adam = AdamState(lr=1e-4)
    batch = [tuple(rng.normal(size=shape) * 0.1 for _ in range(3)) for _ in range(minibatch)]
    peak = [0]

    def step():
        grads = None
        for x, y, t in batch:
            cache = Cache()
            r = unet_residual(x, y, params, cache)
            peak[0] = max(peak[0], cache.nbytes)
            g = unet_backward(params, cache, 2.0 * (x + r - t))
            if grads is None:
                grads = g
            else:
                for name, (gw, gb) in g.items():
                    grads[name][0][...] += gw
                    grads[name][1][...] += gb
        adam_step(params, grads, adam)

    seconds = _median_time(step, repeats)
    if peak[0] != featuremap_bytes(spec, shape):
        raise ContractViolation("featuremap accounting disagrees with the measured cache")
    return peak[0], seconds


def measure_unrolled_cost(N: int, Np: int, Nz: int, n: int = 32, spec: UNetSpec = None,
                          repeats: int = 5, seed: int = 0):
    """Cost of one training iteration of an end-to-end unrolled network, the
    baseline the greedy scheme avoids: forward through N unrolls of
    ``x <- x - g A^T(Ax - b) + f(x)``, then backpropagation through all of
    them, including ``A^T A`` per unroll. Returns (bytes kept for backprop,
    median seconds)."""
    spec = spec or UNetSpec(depth=1, base_channels=4)
    grid = Grid.centered((n, n, Nz), (1.0, 1.0, 1.0))
    geom = fan_beam(Np, Grid.centered((n, n), 1.0))
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed)
    b = project(rng.uniform(0, 0.02, size=grid.shape), grid, geom)
    x0 = np.zeros(grid.shape)
    step = 1e-3

    def iteration():
        x = x0
        caches = []
        for _ in range(N):
            r = project(x, grid, geom) - b
            z = x - step * backproject(r, grid, geom)
            cs = []
            out = np.empty_like(z)
            for k in range(Nz):
                c = Cache()
                out[..., k] = z[..., k] + unet_residual(z[..., k], z[..., k], params, c)
                cs.append(c)
            caches.append(cs)
            x = out
        g = 2.0 * x
        for cs in reversed(caches):
            gz = np.empty_like(g)
            for k, c in enumerate(cs):
                _, (gx, gy) = unet_backward(params, c, g[..., k], input_grad=True)
                gz[..., k] = gx + gy
            g = gz - step * backproject(project(gz, grid, geom), grid, geom)
        return caches

    seconds = _median_time(iteration, repeats)
    bytes_ = N * Nz * featuremap_bytes(spec, (n, n))
    return bytes_, seconds


def measure_cost_grid(configs, n: int = 32, passes: int = 2, seed: int = 0, repeats: int = 5):
    """Time ``measure_unrolled_cost`` over ``configs`` (N, Np, Nz).

    Each pass visits the configurations in a fresh random order and the
    fastest pass is kept, so slow drift on a shared machine does not line up
    with the design. Returns rows (N, Np, Nz, bytes, seconds) in input order.
    """
    configs = [tuple(int(v) for v in c) for c in configs]
    best = {}
    rng = np.random.default_rng(seed)
    for _ in range(max(1, passes)):
        for i in rng.permutation(len(configs)):
            c = configs[i]
            b, s = measure_unrolled_cost(*c, n=n, repeats=repeats)
            best[c] = (b, min(s, best.get(c, (b, math.inf))[1]))
    return [c + best[c] for c in configs]


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------

def write_metrics_csv(path, rows) -> None:
    """Rows of (case, method, rmse_hu, ssim_liver)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["case", "method", "rmse_hu", "ssim_liver"])
        wr.writerows(rows)


def write_cost_csv(path, rows) -> None:
    """Rows of (N, Np, Nz, bytes, seconds)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["N", "Np", "Nz", "bytes", "seconds"])
        wr.writerows(rows)


def read_cost_csv(path, column: str = "seconds"):
    with open(path) as fh:
        rd = csv.DictReader(fh)
        missing = {"N", "Np", "Nz", column} - set(rd.fieldnames or ())
        if missing:
            raise InvalidArgument(f"cost CSV lacks columns {sorted(missing)}")
        return [(float(r["N"]), float(r["Np"]), float(r["Nz"]), float(r[column])) for r in rd]
