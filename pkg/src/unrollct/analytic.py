"""Flat-detector fan-beam FBP with ramp / Hann filtering and a smooth
redundancy weighting for short and limited-angle scans."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._accel import backend, njit, prange
from .core import FanBeamGeometry, Grid, Image, Sinogram, mu_to_hu
from .errors import InvalidArgument

FILTERS = ("ram-lak", "hann")
LIMITED_WEIGHTINGS = ("none", "smooth_redundancy")


@dataclass(frozen=True)
class FbpConfig:
    filter: str = "hann"
    limited_weighting: str = "smooth_redundancy"
    pad_factor: int = 2
    transition_deg: float = 15.0
    overweight: float = 0.15

    def __post_init__(self):
        if self.filter not in FILTERS:
            raise InvalidArgument(f"filter must be one of {FILTERS}")
        if self.limited_weighting not in LIMITED_WEIGHTINGS:
            raise InvalidArgument(f"limited_weighting must be one of {LIMITED_WEIGHTINGS}")
        if int(self.pad_factor) < 2:
            raise InvalidArgument("pad_factor must be >= 2")
        if not 0 <= self.overweight <= 0.25:
            raise InvalidArgument("overweight must lie in [0, 0.25]")


# --------------------------------------------------------------------------
# redundancy weighting
# --------------------------------------------------------------------------

def fan_angles(geom: FanBeamGeometry) -> np.ndarray:
    """Fan angle of each detector element; ray (b, g) is conjugate to (b + pi - 2g, -g)."""
    return np.arctan(geom.det_u() / geom.dsd)


def _taper(b, span, tau):
    t = np.minimum(1.0, np.minimum(b, span - b) / tau)
    return np.where((b >= 0) & (b <= span), np.sin(0.5 * np.pi * np.clip(t, 0, 1)) ** 2, 0.0)


def redundancy_weight(beta, gamma, span, transition=math.radians(15.0), overweight=0.15):
    """Weight of ray (beta, gamma) for a scan covering ``beta`` in [0, span].

    Rays whose conjugate is measured share weight through a sin^2 taper so that
    ``w(b, g) + w(b + pi - 2g, -g) = 1``. Rays without a measured conjugate get
    ``1 + overweight * ramp`` where the ramp rises smoothly from 0 at the edge
    of the missing region.
    """
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if span >= 2 * np.pi - 1e-9:
        return np.full(np.broadcast(beta, gamma).shape, 0.5)
    tau = min(transition, span / 4.0)
    bc = np.mod(beta + np.pi - 2.0 * gamma, 2 * np.pi)
    s = _taper(beta, span, tau)
    sc = _taper(bc, span, tau)
    has_conj = bc <= span
    denom = s + sc
    with np.errstate(invalid="ignore", divide="ignore"):
        shared = np.where(denom > 0, s / np.where(denom > 0, denom, 1.0), 0.5)
    dist = np.minimum(bc - span, 2 * np.pi - bc)  # angular distance to the measured arc
    ramp = np.sin(0.5 * np.pi * np.clip(dist / tau, 0.0, 1.0)) ** 2
    return np.where(has_conj, shared, 1.0 + overweight * ramp)


def redundancy_weights(geom: FanBeamGeometry, transition_deg: float = 15.0,
                       overweight: float = 0.15) -> np.ndarray:
    """Per-ray weights, shape (n_views, n_det). Full 360-degree scans give 0.5."""
    step = geom.angular_step()
    span = geom.span()
    beta = (geom.angles - geom.angles[0])[:, None] + 0.5 * step
    return redundancy_weight(beta, fan_angles(geom)[None, :], span,
                             math.radians(transition_deg), overweight)


# --------------------------------------------------------------------------
# filtering
# --------------------------------------------------------------------------

def ramp_response(n_pad: int, ds: float, window: str = "ram-lak") -> np.ndarray:
    """Frequency response of the band-limited spatial ramp kernel.

    Built from h[0] = 1/(4 ds^2), h[odd k] = -1/(pi k ds)^2, so the DC term is
    that of the discrete kernel (no cupping).
    """
    k = np.arange(n_pad)
    k = np.where(k <= n_pad // 2, k, k - n_pad)
    h = np.zeros(n_pad)
    h[0] = 1.0 / (4.0 * ds * ds)
    odd = (k % 2) != 0
    h[odd] = -1.0 / (np.pi * k[odd] * ds) ** 2
    H = np.real(np.fft.fft(h)) * ds
    if window == "hann":
        f = np.abs(np.fft.fftfreq(n_pad))  # cycles/sample, Nyquist at 0.5
        H = H * 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    elif window != "ram-lak":
        raise InvalidArgument(f"unknown filter {window!r}")
    return H


def filter_rows(p: np.ndarray, ds: float, window: str, pad_factor: int = 2) -> np.ndarray:
    """Ramp-filter along axis 1 (detector) with zero padding."""
    n = p.shape[1]
    n_pad = 1 << int(math.ceil(math.log2(max(2, pad_factor * n))))
    H = ramp_response(n_pad, ds, window)
    shape = [1] * p.ndim
    shape[1] = n_pad
    F = np.fft.fft(p, n=n_pad, axis=1) * H.reshape(shape)
    return np.real(np.fft.ifft(F, axis=1))[:, :n]


# --------------------------------------------------------------------------
# weighted backprojection
# --------------------------------------------------------------------------

@njit(parallel=True, cache=True)
def _bp_nb(q, betas, xs, ys, dso, s0, ds, dbeta):
    nv, nd, nz = q.shape
    nx = xs.size
    ny = ys.size
    out = np.zeros((nx, ny, nz))
    for i in prange(nx):
        for v in range(nv):
            c = math.cos(betas[v])
            sn = math.sin(betas[v])
            for j in range(ny):
                x = xs[i]
                y = ys[j]
                L = dso - (x * c + y * sn)
                s = dso * (-x * sn + y * c) / L
                t = (s - s0) / ds
                k = int(math.floor(t))
                if k < 0 or k >= nd - 1:
                    if k == nd - 1 and t == nd - 1:
                        f = 0.0
                    else:
                        continue
                else:
                    f = t - k
                scale = dbeta * (dso / L) ** 2
                for z in range(nz):
                    val = q[v, k, z] if f == 0.0 else (1.0 - f) * q[v, k, z] + f * q[v, k + 1, z]
                    out[i, j, z] += scale * val
    return out


def _bp_np(q, betas, xs, ys, dso, s0, ds, dbeta):
    nv, nd, nz = q.shape
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    out = np.zeros((xs.size, ys.size, nz))
    for v in range(nv):
        c, sn = math.cos(betas[v]), math.sin(betas[v])
        L = dso - (X * c + Y * sn)
        t = (dso * (-X * sn + Y * c) / L - s0) / ds
        k = np.floor(t).astype(np.int64)
        f = t - k
        inside = (k >= 0) & (k < nd - 1)
        edge = (k == nd - 1) & (f == 0.0)
        kk = np.clip(k, 0, nd - 2)
        val = (1.0 - f)[..., None] * q[v, kk] + f[..., None] * q[v, kk + 1]
        val = np.where(edge[..., None], q[v, nd - 1][None, None, :] if nd else 0.0, val)
        val = np.where((inside | edge)[..., None], val, 0.0)
        out += (dbeta * (dso / L) ** 2)[..., None] * val
    return out


def fbp(sino: Sinogram, grid: Grid, cfg: FbpConfig = FbpConfig()) -> Image:
    """Filtered backprojection returning an HU image on ``grid``."""
    return Image(mu_to_hu(fbp_mu(sino, grid, cfg)), grid.spacing, grid.origin)


def fbp_mu(sino: Sinogram, grid: Grid, cfg: FbpConfig = FbpConfig()) -> np.ndarray:
    """Filtered backprojection in attenuation units (mm^-1); linear in the data."""
    geom = sino.geometry
    if sino.n_views < 1 or sino.data.size == 0:
        raise InvalidArgument("empty sinogram")
    if geom.span() <= 0:
        raise InvalidArgument("sinogram views must span a positive arc")
    p = np.asarray(sino.data, dtype=np.float64)
    p = p if p.ndim == 3 else p[:, :, None]
    if p.shape[2] != grid.n_slices:
        raise InvalidArgument("sinogram slices do not match grid")

    mag = geom.dso / geom.dsd
    s = geom.det_u() * mag  # virtual detector through the isocentre
    ds = geom.det_pitch * mag
    pre = geom.dso / np.sqrt(geom.dso ** 2 + s ** 2)
    if cfg.limited_weighting == "smooth_redundancy":
        w = redundancy_weights(geom, cfg.transition_deg, cfg.overweight)
    else:
        w = np.full((geom.n_views, geom.n_det), 0.5)
    p = p * (w * pre[None, :])[:, :, None]
    q = np.ascontiguousarray(filter_rows(p, ds, cfg.filter, cfg.pad_factor))

    xs = grid.axis_centers(0)
    ys = grid.axis_centers(1)
    args = (q, np.ascontiguousarray(geom.angles), xs, ys, geom.dso, float(s[0]), ds,
            geom.angular_step())
    out = _bp_nb(*args) if backend() == "numba" else _bp_np(*args)
    return out if grid.ndim == 3 else out[:, :, 0]
