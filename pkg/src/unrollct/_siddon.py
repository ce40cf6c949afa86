"""Siddon ray traversal kernels.

Each ray is the segment S + a (D - S), a in [0, 1]. Plane crossings in x and
y are merged in order and every segment between consecutive crossings is
charged to the voxel containing its midpoint (``floor``), so a ray lying
exactly on a grid line belongs to the voxel whose low edge it touches.

Two interchangeable paths: numba loops (``*_nb``) and chunked numpy
(``*_np``). Both return identical segment lengths up to rounding.
"""
import math

import numpy as np

from ._accel import njit, prange


def ray_endpoints(angles, u, dso, dsd):
    """Source and detector-element positions, arrays of shape (n_views, n_det)."""
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    sx = np.broadcast_to(dso * c, (len(angles), len(u)))
    sy = np.broadcast_to(dso * s, (len(angles), len(u)))
    dx = -(dsd - dso) * c - u[None, :] * s
    dy = -(dsd - dso) * s + u[None, :] * c
    return sx, sy, dx, dy


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

@njit(cache=True)
def _trace(sx, sy, ex, ey, x0, y0, px, py, nx, ny, ibuf, jbuf, lbuf):
    """Fill (ibuf, jbuf, lbuf) with the voxels and lengths along one ray.

    (x0, y0) is the low corner of the grid, (px, py) the voxel pitch.
    Returns the number of segments written.
    """
    dx = ex - sx
    dy = ey - sy
    length = math.sqrt(dx * dx + dy * dy)
    amin = 0.0
    amax = 1.0
    x1 = x0 + nx * px
    y1 = y0 + ny * py
    if dx != 0.0:
        a0 = (x0 - sx) / dx
        a1 = (x1 - sx) / dx
        if a0 > a1:
            a0, a1 = a1, a0
        amin = max(amin, a0)
        amax = min(amax, a1)
    elif not (x0 <= sx < x1):
        return 0
    if dy != 0.0:
        a0 = (y0 - sy) / dy
        a1 = (y1 - sy) / dy
        if a0 > a1:
            a0, a1 = a1, a0
        amin = max(amin, a0)
        amax = min(amax, a1)
    elif not (y0 <= sy < y1):
        return 0
    if amin >= amax:
        return 0

    # first candidate plane index and step along each axis
    if dx > 0.0:
        kx = max(0, int(math.floor((sx + amin * dx - x0) / px)))
        stx = 1
    elif dx < 0.0:
        kx = min(nx, int(math.ceil((sx + amin * dx - x0) / px)))
        stx = -1
    else:
        kx = -1
        stx = 0
    if dy > 0.0:
        ky = max(0, int(math.floor((sy + amin * dy - y0) / py)))
        sty = 1
    elif dy < 0.0:
        ky = min(ny, int(math.ceil((sy + amin * dy - y0) / py)))
        sty = -1
    else:
        ky = -1
        sty = 0

    ax = math.inf
    while stx != 0 and 0 <= kx <= nx:
        ax = (x0 + kx * px - sx) / dx
        if ax > amin:
            break
        kx += stx
        ax = math.inf
    if not (0 <= kx <= nx):
        ax = math.inf
    ay = math.inf
    while sty != 0 and 0 <= ky <= ny:
        ay = (y0 + ky * py - sy) / dy
        if ay > amin:
            break
        ky += sty
        ay = math.inf
    if not (0 <= ky <= ny):
        ay = math.inf

    a = amin
    n = 0
    while a < amax:
        an = min(ax, ay, amax)
        seg = an - a
        if seg > 0.0:
            mid = a + 0.5 * seg
            i = int(math.floor((sx + mid * dx - x0) / px))
            j = int(math.floor((sy + mid * dy - y0) / py))
            if 0 <= i < nx and 0 <= j < ny:
                ibuf[n] = i
                jbuf[n] = j
                lbuf[n] = seg * length
                n += 1
        a = max(a, an)
        if ax <= an:
            kx += stx
            ax = (x0 + kx * px - sx) / dx if 0 <= kx <= nx else math.inf
        if ay <= an:
            ky += sty
            ay = (y0 + ky * py - sy) / dy if 0 <= ky <= ny else math.inf
    return n


@njit(parallel=True, cache=True)
def forward_nb(mu, sx, sy, ex, ey, x0, y0, px, py):
    nx, ny, nz = mu.shape
    nv, nd = sx.shape
    out = np.zeros((nv, nd, nz))
    cap = nx + ny + 4
    for v in prange(nv):
        ibuf = np.empty(cap, np.int64)
        jbuf = np.empty(cap, np.int64)
        lbuf = np.empty(cap)
        for d in range(nd):
            n = _trace(sx[v, d], sy[v, d], ex[v, d], ey[v, d], x0, y0, px, py,
                       nx, ny, ibuf, jbuf, lbuf)
            for t in range(n):
                ln = lbuf[t]
                i = ibuf[t]
                j = jbuf[t]
                for z in range(nz):
                    out[v, d, z] += ln * mu[i, j, z]
    return out


@njit(parallel=True, cache=True)
def back_nb(sino, sx, sy, ex, ey, x0, y0, px, py, nx, ny, n_chunks):
    nv, nd, nz = sino.shape
    partial = np.zeros((n_chunks, nx, ny, nz))
    per = (nv + n_chunks - 1) // n_chunks
    cap = nx + ny + 4
    for c in prange(n_chunks):
        ibuf = np.empty(cap, np.int64)
        jbuf = np.empty(cap, np.int64)
        lbuf = np.empty(cap)
        for v in range(c * per, min(nv, (c + 1) * per)):
            for d in range(nd):
                n = _trace(sx[v, d], sy[v, d], ex[v, d], ey[v, d], x0, y0, px, py,
                           nx, ny, ibuf, jbuf, lbuf)
                for t in range(n):
                    ln = lbuf[t]
                    i = ibuf[t]
                    j = jbuf[t]
                    for z in range(nz):
                        partial[c, i, j, z] += ln * sino[v, d, z]
    out = np.zeros((nx, ny, nz))
    for c in range(n_chunks):  # fixed reduction order
        out += partial[c]
    return out


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------

def _segments_np(sx, sy, ex, ey, x0, y0, px, py, nx, ny):
    """Vectorized traversal for a batch of rays (1-D inputs).

    Returns (flat voxel index, length, valid mask), each (n_rays, n_seg).
    """
    dx = ex - sx
    dy = ey - sy
    length = np.hypot(dx, dy)
    xe = x0 + px * np.arange(nx + 1)
    ye = y0 + py * np.arange(ny + 1)
    amin = np.zeros_like(sx)
    amax = np.ones_like(sx)
    hit = np.ones(sx.shape, bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for s, d, lo, hi in ((sx, dx, xe[0], xe[-1]), (sy, dy, ye[0], ye[-1])):
            a0 = (lo - s) / d
            a1 = (hi - s) / d
            par = d == 0.0
            lo_a = np.where(par, -np.inf, np.minimum(a0, a1))
            hi_a = np.where(par, np.inf, np.maximum(a0, a1))
            hit &= ~par | ((lo <= s) & (s < hi))
            amin = np.maximum(amin, lo_a)
            amax = np.minimum(amax, hi_a)
        ax = (xe[None, :] - sx[:, None]) / dx[:, None]
        ay = (ye[None, :] - sy[:, None]) / dy[:, None]
    hit &= amin < amax
    lo = amin[:, None]
    hi = amax[:, None]
    alphas = np.concatenate([lo, hi, ax, ay], axis=1)
    alphas = np.where(np.isfinite(alphas), alphas, lo)
    alphas = np.clip(alphas, lo, hi)
    alphas.sort(axis=1)
    seg = np.diff(alphas, axis=1)
    mid = alphas[:, :-1] + 0.5 * seg
    i = np.floor((sx[:, None] + mid * dx[:, None] - x0) / px).astype(np.int64)
    j = np.floor((sy[:, None] + mid * dy[:, None] - y0) / py).astype(np.int64)
    valid = (seg > 0) & hit[:, None] & (i >= 0) & (i < nx) & (j >= 0) & (j < ny)
    flat = np.where(valid, i * ny + j, 0)
    return flat, seg * length[:, None], valid


def _chunks(n, nx, ny, budget=4_000_000):
    step = max(1, budget // (nx + ny + 4))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def forward_np(mu, sx, sy, ex, ey, x0, y0, px, py):
    nx, ny, nz = mu.shape
    shape = sx.shape
    sx, sy, ex, ey = (np.ascontiguousarray(a).ravel() for a in (sx, sy, ex, ey))
    flat_mu = mu.reshape(nx * ny, nz)
    out = np.zeros((sx.size, nz))
    for sl in _chunks(sx.size, nx, ny):
        flat, ln, valid = _segments_np(sx[sl], sy[sl], ex[sl], ey[sl], x0, y0, px, py, nx, ny)
        ln = np.where(valid, ln, 0.0)
        out[sl] = np.einsum("rs,rsz->rz", ln, flat_mu[flat])
    return out.reshape(shape + (nz,))


def back_np(sino, sx, sy, ex, ey, x0, y0, px, py, nx, ny):
    nz = sino.shape[-1]
    sx, sy, ex, ey = (np.ascontiguousarray(a).ravel() for a in (sx, sy, ex, ey))
    vals = sino.reshape(-1, nz)
    out = np.zeros((nx * ny, nz))
    for sl in _chunks(sx.size, nx, ny):
        flat, ln, valid = _segments_np(sx[sl], sy[sl], ex[sl], ey[sl], x0, y0, px, py, nx, ny)
        idx = flat[valid]
        lv = ln[valid]
        rows = np.nonzero(valid)[0]
        for z in range(nz):
            out[:, z] += np.bincount(idx, weights=lv * vals[sl][rows, z], minlength=nx * ny)
    return out.reshape(nx, ny, nz)
