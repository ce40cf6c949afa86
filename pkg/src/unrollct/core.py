"""Domain types, phantoms, sampling patterns, noise and raw/sidecar I/O.

Images are stored in HU. The projector works on linear attenuation
``mu = (HU + 1000) / 1000 * MU_WATER`` (mm^-1), so sinogram values are
unitless line integrals.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument

MU_WATER = 0.02  # mm^-1
HU_CONVENTION = f"hu_mu_water={MU_WATER:g}"


def hu_to_mu(hu):
    return (np.asarray(hu, dtype=np.float64) + 1000.0) * (MU_WATER / 1000.0)


def mu_to_hu(mu):
    return np.asarray(mu, dtype=np.float64) * (1000.0 / MU_WATER) - 1000.0


def _readonly(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.flags.writeable = False
    return v


# --------------------------------------------------------------------------
# grid / image
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Voxel lattice: ``shape`` is (nx, ny[, nz]); ``origin`` is the mm
    position of voxel (0, 0[, 0]) center relative to the isocenter."""

    shape: tuple
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(shape) not in (2, 3):
            raise InvalidArgument(f"grid must be 2D or 3D, got shape {shape}")
        if len(spacing) != len(shape) or len(origin) != len(shape):
            raise InvalidArgument("spacing/origin length must match shape")
        if min(shape) < 1:
            raise InvalidArgument(f"all dimensions must be >= 1, got {shape}")
        if not all(s > 0 and math.isfinite(s) for s in spacing):
            raise InvalidArgument(f"spacing must be positive, got {spacing}")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @classmethod
    def centered(cls, shape, spacing) -> "Grid":
        shape = tuple(int(s) for s in shape)
        if np.isscalar(spacing):
            spacing = (float(spacing),) * len(shape)
        origin = tuple(-(n - 1) / 2.0 * s for n, s in zip(shape, spacing))
        return cls(shape, tuple(spacing), origin)

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def n_slices(self) -> int:
        return self.shape[2] if self.ndim == 3 else 1

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + self.spacing[axis] * np.arange(self.shape[axis])


@dataclass(frozen=True)
class Image:
    """Voxel image in HU."""

    data: np.ndarray
    spacing: tuple
    origin: Optional[tuple] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim not in (2, 3):
            raise InvalidArgument(f"image must be 2D or 3D, got ndim={data.ndim}")
        spacing = self.spacing
        if np.isscalar(spacing):
            spacing = (float(spacing),) * data.ndim
        origin = self.origin
        if origin is None:
            origin = tuple(-(n - 1) / 2.0 * s for n, s in zip(data.shape, spacing))
        grid = Grid(data.shape, spacing, origin)  # validates
        if not np.all(np.isfinite(data)):
            raise InvalidArgument("image contains non-finite values")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", grid.spacing)
        object.__setattr__(self, "origin", grid.origin)

    @property
    def grid(self) -> Grid:
        return Grid(self.data.shape, self.spacing, self.origin)

    @property
    def shape(self):
        return self.data.shape

    def mu(self) -> np.ndarray:
        return hu_to_mu(self.data)

    @classmethod
    def from_mu(cls, mu, grid: Grid) -> "Image":
        return cls(mu_to_hu(mu), grid.spacing, grid.origin)

    def with_data(self, data) -> "Image":
        return Image(data, self.spacing, self.origin)


# --------------------------------------------------------------------------
# geometry / sinogram
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FanBeamGeometry:
    """Flat equispaced-detector fan beam, one fan per slice plane.

    Source at ``dso * (cos b, sin b)``; detector centre at
    ``-(dsd - dso) * (cos b, sin b)`` with its ``u`` axis along ``(-sin b, cos b)``.
    """

    dso: float
    dsd: float
    det_pitch: float
    n_det: int
    angles: np.ndarray
    slice_spacing: float = 1.0
    det_offset: float = 0.0  # mm shift of detector centre along u

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64).ravel()
        if not (self.dsd > self.dso > 0):
            raise InvalidArgument(f"need dsd > dso > 0, got dso={self.dso}, dsd={self.dsd}")
        if not self.det_pitch > 0:
            raise InvalidArgument("det_pitch must be positive")
        if int(self.n_det) < 1:
            raise InvalidArgument("n_det must be >= 1")
        if angles.size < 1 or not np.all(np.isfinite(angles)):
            raise InvalidArgument("angles must be a non-empty finite list")
        if angles.size > 1:
            if np.any(np.diff(angles) <= 0):
                raise InvalidArgument("angles must be strictly increasing")
            if angles[-1] - angles[0] >= 2 * np.pi - 1e-12:
                raise InvalidArgument("angles must lie within one rotation")
        object.__setattr__(self, "n_det", int(self.n_det))
        object.__setattr__(self, "dso", float(self.dso))
        object.__setattr__(self, "dsd", float(self.dsd))
        object.__setattr__(self, "det_pitch", float(self.det_pitch))
        object.__setattr__(self, "angles", _readonly(angles))

    @property
    def n_views(self) -> int:
        return self.angles.size

    def det_u(self) -> np.ndarray:
        """Detector element centres (mm along the flat panel)."""
        return (np.arange(self.n_det) - (self.n_det - 1) / 2.0) * self.det_pitch + self.det_offset

    def angular_step(self) -> float:
        if self.n_views < 2:
            return 2 * np.pi
        return float(np.median(np.diff(self.angles)))

    def span(self) -> float:
        """Angular coverage in radians, counting one step per view."""
        return float(self.angles[-1] - self.angles[0] + self.angular_step())

    def subset(self, views) -> "FanBeamGeometry":
        return replace(self, angles=self.angles[np.asarray(views, dtype=np.int64)])

    def __eq__(self, other):
        if not isinstance(other, FanBeamGeometry):
            return NotImplemented
        return (self.dso, self.dsd, self.det_pitch, self.n_det, self.slice_spacing,
                self.det_offset) == (other.dso, other.dsd, other.det_pitch, other.n_det,
                                     other.slice_spacing, other.det_offset) and \
            np.array_equal(self.angles, other.angles)

    __hash__ = None


def fan_beam(n_views: int, grid: Grid, dso: float = 500.0, dsd: float = 1000.0,
             fov_scale: float = 1.05, arc: float = 2 * np.pi, start: float = 0.0,
             det_pitch: Optional[float] = None) -> FanBeamGeometry:
    """Geometry whose fan covers the grid's inscribed circle (times ``fov_scale``).

    The detector pitch defaults to one voxel spacing magnified to the detector.
    """
    radius = 0.5 * min(grid.shape[0] * grid.spacing[0], grid.shape[1] * grid.spacing[1]) * fov_scale
    if radius >= dso:
        raise InvalidArgument("field of view does not fit inside the source circle")
    if det_pitch is None:
        det_pitch = grid.spacing[0] * dsd / dso
    half = dsd * math.tan(math.asin(radius / dso))
    n_det = 2 * int(math.ceil(half / det_pitch))
    angles = start + arc * np.arange(n_views) / n_views
    slice_spacing = grid.spacing[2] if grid.ndim == 3 else 1.0
    return FanBeamGeometry(dso, dsd, det_pitch, n_det, angles, slice_spacing)


@dataclass(frozen=True)
class Sinogram:
    """Line integrals, shape (n_views, n_det[, n_slices])."""

    data: np.ndarray
    geometry: FanBeamGeometry
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        g = self.geometry
        if data.ndim not in (2, 3) or data.shape[:2] != (g.n_views, g.n_det):
            raise InvalidArgument(
                f"sinogram shape {data.shape} does not match geometry ({g.n_views}, {g.n_det})")
        if not np.all(np.isfinite(data)):
            raise InvalidArgument("sinogram contains non-finite values")
        object.__setattr__(self, "data", _readonly(data))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != data.shape:
                raise InvalidArgument(f"weights shape {w.shape} != data shape {data.shape}")
            if not np.all(np.isfinite(w)) or np.any(w < 0):
                raise InvalidArgument("weights must be finite and >= 0")
            object.__setattr__(self, "weights", _readonly(w))

    @property
    def n_views(self) -> int:
        return self.data.shape[0]

    @property
    def n_slices(self) -> int:
        return self.data.shape[2] if self.data.ndim == 3 else 1

    def weights_or_ones(self) -> np.ndarray:
        return np.ones_like(self.data) if self.weights is None else np.asarray(self.weights)


def validate_image(img: Image) -> None:
    """Re-check the Image invariants (raises InvalidArgument)."""
    Image(img.data, img.spacing, img.origin)


def validate_sinogram(sino: Sinogram) -> None:
    Sinogram(sino.data, sino.geometry, sino.weights)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplingPattern:
    """View selection mask. ``angles`` records the view angles the mask was
    built for so that re-applying a pattern to already-sampled data is a no-op."""

    kind: str
    param: float
    selected: np.ndarray
    angles: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=bool).ravel()
        if not sel.any():
            raise InvalidArgument("sampling pattern selects no views")
        object.__setattr__(self, "selected", _readonly(sel))

    @classmethod
    def full(cls, geom: FanBeamGeometry) -> "SamplingPattern":
        return cls("full", 1, np.ones(geom.n_views, bool), geom.angles)

    @classmethod
    def sparse(cls, geom: FanBeamGeometry, factor: int) -> "SamplingPattern":
        factor = int(factor)
        if factor < 1:
            raise InvalidArgument("sparse factor must be >= 1")
        sel = np.zeros(geom.n_views, bool)
        sel[::factor] = True
        return cls("sparse", factor, sel, geom.angles)

    @classmethod
    def limited(cls, geom: FanBeamGeometry, arc_degrees: float) -> "SamplingPattern":
        if not arc_degrees > 0:
            raise InvalidArgument("limited arc must be positive")
        rel = np.degrees(geom.angles - geom.angles[0])
        sel = rel < arc_degrees - 1e-9
        return cls("limited", float(arc_degrees), sel, geom.angles)

    @classmethod
    def parse(cls, spec: str, geom: FanBeamGeometry) -> "SamplingPattern":
        """``full``, ``sparse:4`` or ``limited:150``."""
        kind, _, arg = spec.strip().partition(":")
        if kind == "full":
            return cls.full(geom)
        if kind == "sparse":
            return cls.sparse(geom, int(arg))
        if kind == "limited":
            return cls.limited(geom, float(arg))
        raise InvalidArgument(f"unknown sampling pattern {spec!r}")


def apply_sampling(sino: Sinogram, pattern: SamplingPattern) -> Sinogram:
    mask = pattern.selected
    if mask.size != sino.n_views:
        if pattern.angles is None or pattern.angles.size != mask.size:
            raise InvalidArgument(
                f"pattern mask length {mask.size} != sinogram views {sino.n_views}")
        idx = np.searchsorted(pattern.angles, sino.geometry.angles)
        idx = np.clip(idx, 0, mask.size - 1)
        if not np.allclose(pattern.angles[idx], sino.geometry.angles, rtol=0, atol=1e-12):
            raise InvalidArgument(
                f"pattern mask length {mask.size} != sinogram views {sino.n_views}")
        mask = mask[idx]
    views = np.flatnonzero(mask)
    w = None if sino.weights is None else sino.weights[views]
    return Sinogram(sino.data[views], sino.geometry.subset(views), w)


def add_poisson_noise(sino: Sinogram, I0: float, seed: int, passthrough: bool = False) -> Sinogram:
    """Transmission noise: ``p -> -log(max(Poisson(I0 exp(-p)), 1) / I0)``.

    ``I0 = inf`` or ``passthrough=True`` returns the input unchanged.
    """
    if not I0 > 0:
        raise InvalidArgument(f"I0 must be > 0, got {I0}")
    if passthrough or math.isinf(I0):
        return sino
    rng = np.random.default_rng(seed)
    counts = rng.poisson(I0 * np.exp(-np.asarray(sino.data))).astype(np.float64)
    np.maximum(counts, 1.0, out=counts)
    return Sinogram(-np.log(counts / I0), sino.geometry, counts)


# --------------------------------------------------------------------------
# phantoms
# --------------------------------------------------------------------------

# (x0, y0, a, b, phi_deg, intensity) in the unit square, canonical 10-ellipse table
SHEPP_LOGAN = (
    (0.0, 0.0, 0.69, 0.92, 0.0, 2.0),
    (0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98),
    (0.22, 0.0, 0.11, 0.31, -18.0, -0.02),
    (-0.22, 0.0, 0.16, 0.41, 18.0, -0.02),
    (0.0, 0.35, 0.21, 0.25, 0.0, 0.01),
    (0.0, 0.1, 0.046, 0.046, 0.0, 0.01),
    (0.0, -0.1, 0.046, 0.046, 0.0, 0.01),
    (-0.08, -0.605, 0.046, 0.023, 0.0, 0.01),
    (0.0, -0.605, 0.023, 0.023, 0.0, 0.01),
    (0.06, -0.605, 0.023, 0.046, 0.0, 0.01),
)
# intensity -> HU: shell (2.0) lands at +840 HU
SHEPP_LOGAN_SCALE = 0.92


def shepp_logan_hu(intensity):
    return 1000.0 * (SHEPP_LOGAN_SCALE * np.asarray(intensity) - 1.0)


def _ellipse_mask(X, Y, x0, y0, a, b, phi):
    c, s = math.cos(phi), math.sin(phi)
    xr = (X - x0) * c + (Y - y0) * s
    yr = -(X - x0) * s + (Y - y0) * c
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


def _unit_coords(n: int):
    # voxel centres in [-1, 1] normalized coordinates; i along x, j along y
    t = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    return np.meshgrid(t, t, indexing="ij")


def make_shepp_logan(n: int, spacing: float = 1.0) -> Image:
    if n < 16:
        raise InvalidArgument(f"Shepp-Logan grid must be >= 16, got {n}")
    X, Y = _unit_coords(n)
    intensity = np.zeros((n, n))
    for x0, y0, a, b, phi, val in SHEPP_LOGAN:
        intensity[_ellipse_mask(X, Y, x0, y0, a, b, math.radians(phi))] += val
    return Image(shepp_logan_hu(intensity), spacing)


def make_ellipse_phantom(seed: int, n: int, n_ellipses: int, spacing: float = 1.0,
                         n_lesions: int = 3, body_hu: float = 0.0) -> Image:
    """Random soft-tissue phantom.

    A body ellipse at ``body_hu`` in air, ``n_ellipses`` painted inserts with
    contrast in [-200, 200] HU and ``n_lesions`` small low-contrast disks
    (|contrast| in [10, 50] HU) added on top.
    """
    if n_ellipses < 0 or n_lesions < 0:
        raise InvalidArgument("n_ellipses and n_lesions must be >= 0")
    if n < 8:
        raise InvalidArgument("phantom grid must be >= 8")
    rng = np.random.default_rng(seed)
    X, Y = _unit_coords(n)
    img = np.full((n, n), -1000.0)
    ba = rng.uniform(0.78, 0.92)
    bb = rng.uniform(0.6, 0.8)
    bphi = rng.uniform(-0.3, 0.3)
    body = _ellipse_mask(X, Y, 0.0, 0.0, ba, bb, bphi)
    img[body] = body_hu

    def inside_body(x0, y0, r):
        c, s = math.cos(bphi), math.sin(bphi)
        xr, yr = x0 * c + y0 * s, -x0 * s + y0 * c
        return (abs(xr) + r) / ba <= 0.95 and (abs(yr) + r) / bb <= 0.95 and \
            (xr / (ba - r)) ** 2 + (yr / (bb - r)) ** 2 <= 0.9

    placed = 0
    while placed < n_ellipses:
        a = rng.uniform(0.05, 0.3)
        b = rng.uniform(0.05, 0.3)
        x0, y0 = rng.uniform(-0.7, 0.7, size=2)
        phi = rng.uniform(0, np.pi)
        contrast = rng.uniform(-200.0, 200.0)
        if not inside_body(x0, y0, max(a, b)):
            continue
        img[_ellipse_mask(X, Y, x0, y0, a, b, phi) & body] = body_hu + contrast
        placed += 1
    placed = 0
    while placed < n_lesions:
        r = rng.uniform(0.03, 0.08)
        x0, y0 = rng.uniform(-0.7, 0.7, size=2)
        contrast = rng.uniform(10.0, 50.0) * rng.choice([-1.0, 1.0])
        if not inside_body(x0, y0, r):
            continue
        img[_ellipse_mask(X, Y, x0, y0, r, r, 0.0) & body] += contrast
        placed += 1
    return Image(img, spacing)


# --------------------------------------------------------------------------
# raw + sidecar serialization
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(x)) if not isinstance(x, (int, np.integer)) else str(int(x))
                        for x in np.asarray(v).tolist())
    return str(v)


def _write_sidecar(path: Path, meta: dict) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in meta.items()]
    path.write_text("\n".join(lines) + "\n")


def read_sidecar(path) -> dict:
    meta = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise InvalidArgument(f"malformed sidecar line: {line!r}")
        meta[key.strip()] = val.strip()
    return meta


def _floats(s: str) -> tuple:
    return tuple(float(x) for x in s.split())


def _ints(s: str) -> tuple:
    return tuple(int(x) for x in s.split())


def _raw_paths(stem):
    stem = Path(stem)
    if stem.suffix in (".raw", ".txt"):
        stem = stem.with_suffix("")
    return stem.with_suffix(".raw"), stem.with_suffix(".txt")


def _write_raw(path: Path, a: np.ndarray) -> None:
    # row-major (C order) little-endian float32
    np.ascontiguousarray(a, dtype="<f4").tofile(path)


def _read_raw(path: Path, shape) -> np.ndarray:
    a = np.fromfile(path, dtype="<f4")
    if a.size != int(np.prod(shape)):
        raise InvalidArgument(f"{path}: expected {int(np.prod(shape))} values, found {a.size}")
    return a.reshape(shape).astype(np.float64)


def save_image(img: Image, stem) -> Path:
    raw, txt = _raw_paths(stem)
    raw.parent.mkdir(parents=True, exist_ok=True)
    _write_raw(raw, img.data)
    _write_sidecar(txt, {"kind": "image", "dims": img.shape, "spacing": img.spacing,
                         "origin": img.origin, "units": "HU", "convention": HU_CONVENTION,
                         "dtype": "float32-le", "order": "C"})
    return raw


def load_image(stem) -> Image:
    raw, txt = _raw_paths(stem)
    meta = read_sidecar(txt)
    if meta.get("kind") != "image":
        raise InvalidArgument(f"{txt} does not describe an image")
    dims = _ints(meta["dims"])
    return Image(_read_raw(raw, dims), _floats(meta["spacing"]), _floats(meta["origin"]))


def geometry_meta(g: FanBeamGeometry) -> dict:
    return {"dso": repr(g.dso), "dsd": repr(g.dsd), "det_pitch": repr(g.det_pitch),
            "n_det": g.n_det, "slice_spacing": repr(float(g.slice_spacing)),
            "det_offset": repr(float(g.det_offset)), "angles": g.angles}


def geometry_from_meta(meta: dict) -> FanBeamGeometry:
    return FanBeamGeometry(float(meta["dso"]), float(meta["dsd"]), float(meta["det_pitch"]),
                           int(meta["n_det"]), np.array(_floats(meta["angles"])),
                           float(meta.get("slice_spacing", 1.0)),
                           float(meta.get("det_offset", 0.0)))


def save_sinogram(sino: Sinogram, stem) -> Path:
    raw, txt = _raw_paths(stem)
    raw.parent.mkdir(parents=True, exist_ok=True)
    _write_raw(raw, sino.data)
    meta = {"kind": "sinogram", "dims": sino.data.shape, "units": "line-integral",
            "convention": HU_CONVENTION, "dtype": "float32-le", "order": "C"}
    meta.update(geometry_meta(sino.geometry))
    if sino.weights is not None:
        wpath = raw.with_suffix(".weights.raw")
        _write_raw(wpath, sino.weights)
        meta["weights"] = wpath.name
    _write_sidecar(txt, meta)
    return raw


def load_sinogram(stem) -> Sinogram:
    raw, txt = _raw_paths(stem)
    meta = read_sidecar(txt)
    if meta.get("kind") != "sinogram":
        raise InvalidArgument(f"{txt} does not describe a sinogram")
    dims = _ints(meta["dims"])
    w = None
    if "weights" in meta:
        w = _read_raw(raw.parent / meta["weights"], dims)
    return Sinogram(_read_raw(raw, dims), geometry_from_meta(meta), w)


def window_to_uint8(hu, center: float = 40.0, width: float = 400.0) -> np.ndarray:
    """Map HU to 0..255 with the (center, width) display window."""
    if not width > 0:
        raise InvalidArgument("window width must be positive")
    lo = center - width / 2.0
    v = (np.asarray(hu, dtype=np.float64) - lo) / width
    return np.round(np.clip(v, 0.0, 1.0) * 255.0).astype(np.uint8)


def export_windowed(img: Image, path, center: float = 40.0, width: float = 400.0,
                    slice_index: Optional[int] = None) -> Path:
    """Write an 8-bit PNG or PGM (chosen by suffix). Rows are y, columns x."""
    from PIL import Image as PILImage

    data = img.data
    if data.ndim == 3:
        k = data.shape[2] // 2 if slice_index is None else slice_index
        data = data[:, :, k]
    pix = window_to_uint8(data.T[::-1], center, width)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else "PNG"
    PILImage.fromarray(pix, mode="L").save(path, format=fmt)
    return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
