"""Ordered-subsets separable quadratic surrogate (OS-SQS) machinery and the
smoothed-TV baseline.

All iterates are attenuation arrays (mm^-1) on a Grid. The TV term is taken on
the water-normalized image ``mu / MU_WATER`` so its smoothing ``eps`` is in
HU/1000 units.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .analytic import FbpConfig, fbp_mu, redundancy_weights
from .core import MU_WATER, Grid, Sinogram, mu_to_hu
from .errors import InvalidArgument, NumericalFailure
from .projector import (SubsetPartition, backproject, noise_weights, partition_subsets,
                        project, sqs_denominator)

log = logging.getLogger(__name__)


@dataclass
class OsSqsState:
    x: np.ndarray
    denom: np.ndarray
    partition: SubsetPartition
    grid: Grid
    weights: np.ndarray
    momentum: Optional[tuple] = None

    def __post_init__(self):
        if self.x.shape != self.grid.shape or self.denom.shape != self.grid.shape:
            raise InvalidArgument("iterate/denominator shape does not match grid")
        if np.any(self.denom < 0):
            raise InvalidArgument("SQS denominator must be >= 0")


def _sino_weights(sino: Sinogram, weights) -> np.ndarray:
    if weights is None:
        return sino.weights_or_ones()
    if isinstance(weights, str):
        return noise_weights(sino, weights)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != sino.data.shape:
        raise InvalidArgument("weights shape does not match sinogram")
    return w


def make_state(sino: Sinogram, grid: Grid, M: int, x0, weights=None,
               nesterov: bool = False) -> OsSqsState:
    """Prepare the denominator ``A^T w A 1`` and subset partition for ``sino``."""
    if M > sino.n_views:
        raise InvalidArgument(f"subset count {M} exceeds {sino.n_views} views")
    w = _sino_weights(sino, weights)
    part = partition_subsets(sino.n_views, M)
    denom = sqs_denominator(sino.geometry, grid, w)
    x = np.array(x0, dtype=np.float64)
    mom = (x.copy(), np.array([1.0])) if nesterov else None
    return OsSqsState(x, denom, part, grid, w, mom)


def weighted_data_cost(x, sino: Sinogram, grid: Grid, weights=None) -> float:
    """``||A x - b||_w^2``."""
    w = _sino_weights(sino, weights)
    r = project(x, grid, sino.geometry) - sino.data
    return float(np.sum(w * r * r))


def os_sqs_sweep(state: OsSqsState, sino: Sinogram) -> np.ndarray:
    """One pass over all subsets:
    ``x <- x - M A_m^T w_m (A_m x - b_m) / d`` for m = 1..M in partition order.

    Voxels with ``d = 0`` are not touched. Returns the new iterate and stores
    it on ``state``.
    """
    geom, grid = sino.geometry, state.grid
    M = state.partition.M
    if M > sino.n_views:
        raise InvalidArgument(f"subset count {M} exceeds {sino.n_views} views")
    active = state.denom > 0
    inv_d = np.zeros_like(state.denom)
    inv_d[active] = M / state.denom[active]
    x = state.x.copy()
    b = np.asarray(sino.data)
    for m, views in enumerate(state.partition.subsets):
        r = project(x, grid, geom, views) - b[views]
        g = backproject(state.weights[views] * r, grid, geom, views)
        x -= g * inv_d
        if not np.all(np.isfinite(x)):
            raise NumericalFailure(
                f"non-finite iterate in OS-SQS subset {m} (max |residual| {np.nanmax(np.abs(r)):.3g})")
    state.x = x
    return x


# --------------------------------------------------------------------------
# smoothed isotropic TV
# --------------------------------------------------------------------------

def _diffs(z):
    out = []
    for a in range(z.ndim):
        g = np.zeros_like(z)
        sl_hi = [slice(None)] * z.ndim
        sl_lo = [slice(None)] * z.ndim
        sl_hi[a] = slice(1, None)
        sl_lo[a] = slice(None, -1)
        g[tuple(sl_lo)] = z[tuple(sl_hi)] - z[tuple(sl_lo)]
        out.append(g)
    return out


def _diffs_adjoint(gs):
    z = np.zeros_like(gs[0])
    nd = z.ndim
    for a, g in enumerate(gs):
        sl_hi = [slice(None)] * nd
        sl_lo = [slice(None)] * nd
        sl_hi[a] = slice(1, None)
        sl_lo[a] = slice(None, -1)
        z[tuple(sl_hi)] += g[tuple(sl_lo)]
        z[tuple(sl_lo)] -= g[tuple(sl_lo)]
    return z


def tv_value(z, eps: float = 1e-3) -> float:
    """``sum sqrt(|grad z|^2 + eps^2)`` with forward differences."""
    gs = _diffs(np.asarray(z, dtype=np.float64))
    return float(np.sum(np.sqrt(sum(g * g for g in gs) + eps * eps)))


def tv_gradient(z, eps: float = 1e-3) -> np.ndarray:
    gs = _diffs(np.asarray(z, dtype=np.float64))
    mag = np.sqrt(sum(g * g for g in gs) + eps * eps)
    return _diffs_adjoint([g / mag for g in gs])


def tv_curvature(z, eps: float = 1e-3) -> np.ndarray:
    """Diagonal of a separable quadratic majorizer of TV at ``z``."""
    z = np.asarray(z, dtype=np.float64)
    gs = _diffs(z)
    omega = 1.0 / np.sqrt(sum(g * g for g in gs) + eps * eps)
    c = np.zeros_like(z)
    for a in range(z.ndim):
        valid = np.zeros_like(z)
        sl_hi = [slice(None)] * z.ndim
        sl_lo = [slice(None)] * z.ndim
        sl_hi[a] = slice(1, None)
        sl_lo[a] = slice(None, -1)
        valid[tuple(sl_lo)] = 1.0
        t = 2.0 * omega * valid
        c += t
        c[tuple(sl_hi)] += t[tuple(sl_lo)]
    return c


# --------------------------------------------------------------------------
# TV reconstruction
# --------------------------------------------------------------------------

@dataclass
class TvHistory:
    rows: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iter", "data_cost", "tv_cost", "rmse_vs_ref"])
            wr.writerows(self.rows)


def reconstruct_tv(sino: Sinogram, grid: Grid, beta: float, n_iters: int, M: int = 16,
                   nesterov: bool = True, eps_tv: float = 1e-3, x0=None, weights=None,
                   ref_hu=None, history: Optional[TvHistory] = None,
                   redundancy_in_data_term: bool = False,
                   fbp_cfg: FbpConfig = FbpConfig()) -> np.ndarray:
    """Minimize ``||A x - b||_w^2 + beta TV_eps(x / MU_WATER)`` with OS-SQS.

    Starts from FBP unless ``x0`` (mm^-1) is given. Nesterov momentum is
    restarted whenever the full-iteration cost increases. Returns the final
    attenuation iterate.
    """
    if beta < 0:
        raise InvalidArgument("beta must be >= 0")
    if not eps_tv > 0:
        raise InvalidArgument("eps_tv must be > 0")
    geom = sino.geometry
    w = _sino_weights(sino, weights)
    if redundancy_in_data_term:
        rw = 2.0 * redundancy_weights(geom, fbp_cfg.transition_deg, fbp_cfg.overweight)
        w = w * (rw[:, :, None] if w.ndim == 3 else rw)
    x = fbp_mu(sino, grid, fbp_cfg) if x0 is None else np.array(x0, dtype=np.float64)
    state = make_state(sino, grid, M, x, w)
    active = state.denom > 0
    part = state.partition
    b = np.asarray(sino.data)
    s = 1.0 / MU_WATER

    def cost(v):
        dc = weighted_data_cost(v, sino, grid, w)
        tc = tv_value(v * s, eps_tv) if beta > 0 else 0.0
        return dc, tc

    dc, tc = cost(x)
    prev = dc + beta * tc
    if history is not None:
        history.rows.append([0, dc, tc, _rmse_hu(x, ref_hu)])
    z = x.copy()        # extrapolated point
    t = 1.0
    rises = 0
    for it in range(1, n_iters + 1):
        for m, views in enumerate(part.subsets):
            r = project(z, grid, geom, views) - b[views]
            g = part.M * backproject(w[views] * r, grid, geom, views)
            d = state.denom.copy()
            if beta > 0:
                g += 0.5 * beta * s * tv_gradient(z * s, eps_tv)
                d += 0.5 * beta * s * s * tv_curvature(z * s, eps_tv)
            x_new = z.copy()
            x_new[active] -= g[active] / d[active]
            if not np.all(np.isfinite(x_new)):
                raise NumericalFailure(f"non-finite TV iterate at iteration {it}, subset {m}")
            if nesterov:
                t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
                z = x_new + ((t - 1.0) / t_next) * (x_new - x)
                t = t_next
            else:
                z = x_new
            x = x_new
        dc, tc = cost(x)
        cur = dc + beta * tc
        if history is not None:
            history.rows.append([it, dc, tc, _rmse_hu(x, ref_hu)])
        if cur > prev:
            if nesterov:
                log.debug("TV iteration %d: cost rose, restarting momentum", it)
                z = x.copy()
                t = 1.0
            else:
                rises += 1
                if rises >= 5:
                    raise NumericalFailure(
                        f"TV reconstruction diverging: cost rose 5 consecutive iterations (iteration {it})")
        else:
            rises = 0
        prev = cur
    return x


def _rmse_hu(x_mu, ref_hu):
    if ref_hu is None:
        return float("nan")
    return float(np.sqrt(np.mean((mu_to_hu(x_mu) - np.asarray(ref_hu)) ** 2)))


def sweep_beta(cases: Sequence, grid: Grid, betas: Sequence[float], n_iters: int, M: int = 16,
               nesterov: bool = True, eps_tv: float = 1e-3, fbp_cfg: FbpConfig = FbpConfig()):
    """Pick the beta with the lowest mean RMSE over ``cases`` = [(sino, ref_hu), ...].

    Returns (best_beta, {beta: mean_rmse}, {beta: [reconstructions in HU]}).
    """
    if not betas:
        raise InvalidArgument("betas must be non-empty")
    scores, recs = {}, {}
    for beta in betas:
        out = []
        for sino, ref in cases:
            x = reconstruct_tv(sino, grid, beta, n_iters, M, nesterov, eps_tv, fbp_cfg=fbp_cfg)
            out.append(mu_to_hu(x))
        recs[beta] = out
        scores[beta] = float(np.mean([np.sqrt(np.mean((o - r) ** 2))
                                      for o, (_, r) in zip(out, cases)]))
        log.info("TV beta=%g mean RMSE %.2f HU", beta, scores[beta])
    best = min(scores, key=scores.get)
    return best, scores, recs
