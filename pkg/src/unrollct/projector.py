"""Ray-driven system matrix ``A`` (Siddon) and its exact transpose.

The matrix is never stored; every call retraces the rays. ``project`` and
``backproject`` act on plain attenuation arrays (mm^-1) and are exactly
linear; ``forward_project`` / ``back_project`` wrap them for the Image and
Sinogram types.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _siddon
from ._accel import backend, num_threads
from .core import FanBeamGeometry, Grid, Image, Sinogram
from .errors import InvalidArgument


def _views(geom: FanBeamGeometry, views) -> np.ndarray:
    if views is None:
        return np.arange(geom.n_views)
    views = np.asarray(views, dtype=np.int64).ravel()
    if views.size and (views.min() < 0 or views.max() >= geom.n_views):
        raise InvalidArgument("view index out of range")
    return views


def _rays(geom: FanBeamGeometry, views: np.ndarray):
    sx, sy, ex, ey = _siddon.ray_endpoints(geom.angles[views], geom.det_u(), geom.dso, geom.dsd)
    return (np.ascontiguousarray(sx), np.ascontiguousarray(sy),
            np.ascontiguousarray(ex), np.ascontiguousarray(ey))


def _low_corner(grid: Grid):
    x0 = grid.origin[0] - 0.5 * grid.spacing[0]
    y0 = grid.origin[1] - 0.5 * grid.spacing[1]
    return x0, y0, grid.spacing[0], grid.spacing[1]


def _as3d(a: np.ndarray, grid: Grid) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.shape != grid.shape:
        raise InvalidArgument(f"array shape {a.shape} does not match grid {grid.shape}")
    return np.ascontiguousarray(a if a.ndim == 3 else a[:, :, None])


def project(mu, grid: Grid, geom: FanBeamGeometry, views=None) -> np.ndarray:
    """``A mu`` for the selected views: shape (n_sel, n_det[, nz])."""
    views = _views(geom, views)
    vol = _as3d(mu, grid)
    sx, sy, ex, ey = _rays(geom, views)
    x0, y0, px, py = _low_corner(grid)
    if backend() == "numba":
        out = _siddon.forward_nb(vol, sx, sy, ex, ey, x0, y0, px, py)
    else:
        out = _siddon.forward_np(vol, sx, sy, ex, ey, x0, y0, px, py)
    return out if grid.ndim == 3 else out[:, :, 0]


def backproject(sino, grid: Grid, geom: FanBeamGeometry, views=None) -> np.ndarray:
    """``A^T sino`` where ``sino`` holds rows for ``views`` (default all)."""
    views = _views(geom, views)
    s = np.asarray(sino, dtype=np.float64)
    expect = (views.size, geom.n_det) + ((grid.shape[2],) if grid.ndim == 3 else ())
    if s.shape != expect:
        raise InvalidArgument(f"sinogram shape {s.shape} != expected {expect}")
    s = np.ascontiguousarray(s if s.ndim == 3 else s[:, :, None])
    sx, sy, ex, ey = _rays(geom, views)
    x0, y0, px, py = _low_corner(grid)
    nx, ny = grid.shape[:2]
    if backend() == "numba":
        chunks = max(1, min(num_threads(), views.size))
        out = _siddon.back_nb(s, sx, sy, ex, ey, x0, y0, px, py, nx, ny, chunks)
    else:
        out = _siddon.back_np(s, sx, sy, ex, ey, x0, y0, px, py, nx, ny)
    return out if grid.ndim == 3 else out[:, :, 0]


def forward_project(img: Image, geom: FanBeamGeometry, views=None) -> Sinogram:
    """Line integrals of the image's attenuation along every selected ray."""
    views = _views(geom, views)
    data = project(img.mu(), img.grid, geom, views)
    return Sinogram(data, geom.subset(views))


def back_project(sino: Sinogram, grid: Grid) -> np.ndarray:
    """``A^T`` applied to the sinogram values (no weighting)."""
    return backproject(sino.data, grid, sino.geometry)


def sqs_denominator(geom: FanBeamGeometry, grid: Grid, weights=None, views=None) -> np.ndarray:
    """``A^T w A 1``; zero wherever no weighted ray crosses the voxel."""
    views = _views(geom, views)
    a1 = project(np.ones(grid.shape), grid, geom, views)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != a1.shape:
            raise InvalidArgument(f"weights shape {w.shape} != projection shape {a1.shape}")
        a1 = a1 * w
    return backproject(a1, grid, geom, views)


def noise_weights(sino: Sinogram, model: str = "uniform") -> np.ndarray:
    """Per-ray statistical weights: ``uniform`` (ones) or ``transmission`` (exp(-p))."""
    p = np.asarray(sino.data)
    if not np.all(np.isfinite(p)):
        raise InvalidArgument("sinogram contains non-finite values")
    if model == "uniform":
        return np.ones_like(p)
    if model == "transmission":
        return np.exp(-p)
    raise InvalidArgument(f"unknown noise model {model!r}")


@dataclass(frozen=True)
class SubsetPartition:
    M: int
    subsets: tuple

    @property
    def order(self) -> np.ndarray:
        return np.concatenate(self.subsets)


def bit_reversed_order(n: int) -> np.ndarray:
    """Indices 0..n-1 ordered by bit-reversal over the next power of two."""
    bits = max(0, int(np.ceil(np.log2(n)))) if n > 1 else 0
    order = []
    for i in range(1 << bits):
        r = int(format(i, f"0{bits}b")[::-1], 2) if bits else 0
        if r < n:
            order.append(r)
    return np.array(order, dtype=np.int64)


def partition_subsets(n_views: int, M: int) -> SubsetPartition:
    """Bit-reversed view order cut into ``M`` contiguous chunks."""
    if not 1 <= M <= n_views:
        raise InvalidArgument(f"subset count must be in [1, {n_views}], got {M}")
    order = bit_reversed_order(n_views)
    return SubsetPartition(M, tuple(np.array_split(order, M)))
