"""Two-channel residual UNet ``f(x, y; theta) = x + head(features)``.

Layout for depth D and base width C (widths ``C * 2**l`` at level l):

    enc0a, enc0b              stride-1 convs at full resolution
    down{l}, enc{l}           stride-2 conv then stride-1 conv, l = 1..D
    upconv{l}, dec{l}         nearest upsample + conv, concat with enc{l}, conv
    head                      1x1 conv to one channel, identity activation

Zeroing ``head`` gives the exact identity map ``f(x, y) = x``.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ContractViolation, InvalidArgument
from .layers import (ConvLayer, conv_backward, conv_forward, upsample_nearest,
                     upsample_nearest_backward)


@dataclass(frozen=True)
class UNetSpec:
    depth: int = 2
    base_channels: int = 16
    ndim: int = 2
    kernel: int = 3
    in_channels: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise InvalidArgument("depth must be >= 1")
        if self.base_channels < 1:
            raise InvalidArgument("base_channels must be >= 1")
        if self.ndim not in (2, 3):
            raise InvalidArgument("ndim must be 2 or 3")
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise InvalidArgument("kernel must be odd")

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def multiple(self) -> int:
        """Spatial sizes (and tile offsets) must be multiples of this."""
        return 2 ** self.depth


def layer_manifest(spec: UNetSpec):
    """Ordered (name, in_ch, out_ch, kernel, stride, activation)."""
    k = spec.kernel
    out = [("enc0a", spec.in_channels, spec.width(0), k, 1, "relu"),
           ("enc0b", spec.width(0), spec.width(0), k, 1, "relu")]
    for lv in range(1, spec.depth + 1):
        out.append((f"down{lv}", spec.width(lv - 1), spec.width(lv), k, 2, "relu"))
        out.append((f"enc{lv}", spec.width(lv), spec.width(lv), k, 1, "relu"))
    for lv in range(spec.depth - 1, -1, -1):
        out.append((f"upconv{lv}", spec.width(lv + 1), spec.width(lv), k, 1, "relu"))
        out.append((f"dec{lv}", 2 * spec.width(lv), spec.width(lv), k, 1, "relu"))
    out.append(("head", spec.width(0), 1, 1, 1, "identity"))
    return out


class NetworkParams:
    """Ordered collection of ConvLayers keyed by manifest name."""

    def __init__(self, spec: UNetSpec, layers: "OrderedDict[str, ConvLayer]"):
        self.spec = spec
        self.layers = layers

    def __getitem__(self, name) -> ConvLayer:
        return self.layers[name]

    def names(self):
        return list(self.layers)

    def arrays(self):
        """Flat list of (key, array), kernel then bias per layer, manifest order."""
        out = []
        for name, layer in self.layers.items():
            out.append((f"{name}.weight", layer.weight))
            out.append((f"{name}.bias", layer.bias))
        return out

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, OrderedDict(
            (n, ConvLayer(l.weight.copy(), l.bias.copy(), l.stride, l.activation))
            for n, l in self.layers.items()))

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.arrays())

    def round_to_f32(self) -> "NetworkParams":
        """Copy with every value rounded to float32 (what the file format stores)."""
        p = self.copy()
        for _, a in p.arrays():
            a[...] = a.astype(np.float32)
        return p

    def is_identity(self) -> bool:
        h = self.layers["head"]
        return not np.any(h.weight) and not np.any(h.bias)

    def __eq__(self, other):
        if not isinstance(other, NetworkParams) or other.spec != self.spec:
            return False
        return all(ka == kb and np.array_equal(a, b)
                   for (ka, a), (kb, b) in zip(self.arrays(), other.arrays()))


def init_params(spec: UNetSpec, seed: int = 0) -> NetworkParams:
    """He-uniform kernels, zero biases."""
    rng = np.random.default_rng(seed)
    layers = OrderedDict()
    for name, cin, cout, k, stride, act in layer_manifest(spec):
        fan_in = cin * k ** spec.ndim
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin) + (k,) * spec.ndim)
        layers[name] = ConvLayer(w, np.zeros(cout), stride, act)
    return NetworkParams(spec, layers)


def make_identity_params(spec: UNetSpec, seed: int = 0) -> NetworkParams:
    """Standard initialization with the residual head zeroed: ``f(x, y) = x``."""
    p = init_params(spec, seed)
    p.layers["head"].weight[...] = 0.0
    p.layers["head"].bias[...] = 0.0
    return p


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------

class Cache:
    """Featuremaps kept from the forward pass for backpropagation."""

    def __init__(self):
        self.maps = OrderedDict()

    def put(self, key, arr):
        self.maps[key] = arr
        return arr

    def get(self, key):
        try:
            return self.maps[key]
        except KeyError:
            raise ContractViolation(f"featuremap {key!r} was not cached") from None

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.maps.values())


def _check_input(spec: UNetSpec, x, y):
    if x.shape != y.shape:
        raise InvalidArgument(f"x and y shapes differ: {x.shape} vs {y.shape}")
    if x.ndim != spec.ndim:
        raise InvalidArgument(f"expected {spec.ndim}-D input, got {x.ndim}-D")
    m = spec.multiple
    if any(n % m for n in x.shape):
        raise InvalidArgument(f"spatial dims {x.shape} must be divisible by {m}")


def unet_residual(x, y, params: NetworkParams, cache: Cache = None) -> np.ndarray:
    """The head output alone, so that ``unet_forward = x + unet_residual``."""
    spec = params.spec
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_input(spec, x, y)
    keep = cache.put if cache is not None else (lambda k, a: a)
    h = keep("input", np.stack([x, y]))
    h = keep("enc0a", conv_forward(h, params["enc0a"]))
    skips = [keep("enc0b", conv_forward(h, params["enc0b"]))]
    h = skips[0]
    for lv in range(1, spec.depth + 1):
        h = keep(f"down{lv}", conv_forward(h, params[f"down{lv}"]))
        h = keep(f"enc{lv}", conv_forward(h, params[f"enc{lv}"]))
        skips.append(h)
    for lv in range(spec.depth - 1, -1, -1):
        u = keep(f"up{lv}", upsample_nearest(h))
        u = keep(f"upconv{lv}", conv_forward(u, params[f"upconv{lv}"]))
        h = keep(f"dec{lv}", conv_forward(np.concatenate([skips[lv], u]), params[f"dec{lv}"]))
    return keep("head", conv_forward(h, params["head"]))[0]


def unet_forward(x, y, params: NetworkParams, cache: Cache = None) -> np.ndarray:
    """Single-channel output with the spatial shape of ``x``; featuremaps go
    into ``cache`` when one is given."""
    r = unet_residual(x, y, params, cache)
    return np.asarray(x, dtype=np.float64) + r


def unet_backward(params: NetworkParams, cache: Cache, grad_out, input_grad: bool = False):
    """Parameter gradients ``{layer: (grad_weight, grad_bias)}`` of a scalar loss
    whose gradient with respect to the network output is ``grad_out``.

    Decoder levels are visited in reverse forward order (0 up to depth-1), then
    the encoder from the bottom, adding the skip gradients on the way up. With
    ``input_grad`` the result is ``(grads, (grad_x, grad_y))``, where grad_x
    includes the global skip.
    """
    spec = params.spec
    D = spec.depth
    grads = OrderedDict()
    g = np.asarray(grad_out, dtype=np.float64)[None]
    gx, gw, gb = conv_backward(cache.get("dec0"), params["head"], g, cache.get("head"))
    grads["head"] = (gw, gb)
    g_dec = gx                       # gradient w.r.t. output of dec{lv}
    g_skip = [None] * (D + 1)        # gradient w.r.t. enc outputs via concat skips
    for lv in range(D):
        skip_key = "enc0b" if lv == 0 else f"enc{lv}"
        cat = np.concatenate([cache.get(skip_key), cache.get(f"upconv{lv}")])
        gx, gw, gb = conv_backward(cat, params[f"dec{lv}"], g_dec, cache.get(f"dec{lv}"))
        grads[f"dec{lv}"] = (gw, gb)
        c = spec.width(lv)
        g_skip[lv] = gx[:c]
        gx, gw, gb = conv_backward(cache.get(f"up{lv}"), params[f"upconv{lv}"], gx[c:],
                                   cache.get(f"upconv{lv}"))
        grads[f"upconv{lv}"] = (gw, gb)
        g_below = upsample_nearest_backward(gx)   # w.r.t. h entering up{lv}
        if lv + 1 < D:
            g_dec = g_below                       # that h is dec{lv+1}'s output
        else:
            g_skip[D] = g_below                   # bottom encoder output
    g_enc = g_skip[D]
    for lv in range(D, 0, -1):
        prev = "enc0b" if lv == 1 else f"enc{lv - 1}"
        gx, gw, gb = conv_backward(cache.get(f"down{lv}"), params[f"enc{lv}"], g_enc,
                                   cache.get(f"enc{lv}"))
        grads[f"enc{lv}"] = (gw, gb)
        gx, gw, gb = conv_backward(cache.get(prev), params[f"down{lv}"], gx,
                                   cache.get(f"down{lv}"))
        grads[f"down{lv}"] = (gw, gb)
        g_enc = gx + g_skip[lv - 1]
    gx, gw, gb = conv_backward(cache.get("enc0a"), params["enc0b"], g_enc, cache.get("enc0b"))
    grads["enc0b"] = (gw, gb)
    gin, gw, gb = conv_backward(cache.get("input"), params["enc0a"], gx, cache.get("enc0a"),
                                need_input_grad=input_grad)
    grads["enc0a"] = (gw, gb)
    grads = OrderedDict((n, grads[n]) for n in params.names())
    if input_grad:
        return grads, (gin[0] + g[0], gin[1])
    return grads


def l2_loss(out, target) -> tuple:
    """``sum (out - target)^2`` and its gradient with respect to ``out``."""
    r = np.asarray(out) - np.asarray(target)
    return float(np.sum(r * r)), 2.0 * r


# --------------------------------------------------------------------------
# receptive field and memory accounting
# --------------------------------------------------------------------------

def _dep_conv(lo, hi, k, stride):
    """Input-position interval of each output pixel after one conv (1-D)."""
    h = k // 2
    n = lo.size
    n_out = -(-n // stride)
    centers = np.arange(n_out) * stride
    nlo = np.full(n_out, np.iinfo(np.int64).max)
    nhi = np.full(n_out, np.iinfo(np.int64).min)
    for t in range(-h, h + 1):
        src = centers + t
        ok = (src >= 0) & (src < n)
        nlo[ok] = np.minimum(nlo[ok], lo[src[ok]])
        nhi[ok] = np.maximum(nhi[ok], hi[src[ok]])
    return nlo, nhi


def _dep_up(lo, hi):
    return np.repeat(lo, 2), np.repeat(hi, 2)


def receptive_field(spec_or_layers) -> int:
    """One-sided receptive-field radius in input pixels.

    Accepts a UNetSpec, or a plain stack given as ``[(k, stride), ...]`` or
    ConvLayers. The dependency interval of every pixel is propagated exactly
    along a long 1-D line (kernels are cubic, so supports are boxes) and the
    radius is the worst case over pixel phases away from the ends. Nearest
    upsampling makes the support depend on the phase, which a plain interval
    composition would overestimate.
    """
    if isinstance(spec_or_layers, UNetSpec):
        spec = spec_or_layers
        k = spec.kernel
        n = 2 ** spec.depth * (8 * k * (spec.depth + 2))
        lo = hi = np.arange(n)
        lo, hi = _dep_conv(*_dep_conv(lo, hi, k, 1), k, 1)
        skips = [(lo, hi)]
        for _ in range(spec.depth):
            lo, hi = _dep_conv(*_dep_conv(lo, hi, k, 2), k, 1)
            skips.append((lo, hi))
        for lv in range(spec.depth - 1, -1, -1):
            ulo, uhi = _dep_conv(*_dep_up(lo, hi), k, 1)
            slo, shi = skips[lv]
            lo, hi = _dep_conv(np.minimum(ulo, slo), np.maximum(uhi, shi), k, 1)
    else:
        stack = [(it.k, it.stride) if isinstance(it, ConvLayer) else tuple(it)
                 for it in spec_or_layers]
        scale = int(np.prod([s for _, s in stack])) if stack else 1
        n = scale * 16 * (sum(k for k, _ in stack) + 2)
        lo = hi = np.arange(n)
        for k, s in stack:
            lo, hi = _dep_conv(lo, hi, k, s)
        pos = np.arange(lo.size) * scale
        q = slice(lo.size // 4, 3 * lo.size // 4)
        return int(max(np.max(pos[q] - lo[q]), np.max(hi[q] - pos[q]), 0))
    pos = np.arange(lo.size)
    q = slice(lo.size // 4, 3 * lo.size // 4)
    return int(max(np.max(pos[q] - lo[q]), np.max(hi[q] - pos[q])))


def level_shape(shape, level: int):
    return tuple(-(-n // 2 ** level) for n in shape)


def featuremap_bytes(spec: UNetSpec, shape, itemsize: int = 8) -> int:
    """Exact size of the forward cache for one sample of spatial ``shape``:
    the input, every conv output and every upsample output."""
    def vox(level):
        return int(np.prod(level_shape(shape, level)))

    w = spec.width
    total = spec.in_channels * vox(0) + 2 * w(0) * vox(0)
    for lv in range(1, spec.depth + 1):
        total += 2 * w(lv) * vox(lv)
    for lv in range(spec.depth):
        total += (w(lv + 1) + 2 * w(lv)) * vox(lv)
    total += vox(0)
    return total * itemsize


def macs_per_voxel(spec: UNetSpec) -> float:
    """Forward multiply-accumulates per full-resolution voxel."""
    d = spec.ndim
    total = 0.0
    for name, cin, cout, k, stride, _ in layer_manifest(spec):
        if name.startswith("down"):
            level = int(name[4:])
        elif name.startswith("enc") and name[3:].isdigit():
            level = int(name[3:])
        elif name.startswith("upconv"):
            level = int(name[6:])
        elif name.startswith("dec"):
            level = int(name[3:])
        else:
            level = 0
        total += cin * cout * k ** d / 2 ** (d * level)
    return total


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------

MAGIC = b"UCTNET\x00\x01"
FORMAT_VERSION = 1


def params_to_bytes(params: NetworkParams) -> bytes:
    """Magic, version, JSON header (spec and manifest), then little-endian f32 blobs."""
    header = {
        "version": FORMAT_VERSION,
        "spec": asdict(params.spec),
        "manifest": [[key, list(a.shape)] for key, a in params.arrays()],
    }
    hb = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(hb)), hb]
    parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in params.arrays()]
    return b"".join(parts)


def params_from_bytes(buf: bytes) -> NetworkParams:
    if buf[:len(MAGIC)] != MAGIC:
        raise InvalidArgument("not a network parameter file")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    if header.get("version") != FORMAT_VERSION:
        raise InvalidArgument(f"unsupported parameter file version {header.get('version')}")
    spec = UNetSpec(**header["spec"])
    expected = init_params(spec, 0)
    want = [[k, list(a.shape)] for k, a in expected.arrays()]
    if header["manifest"] != want:
        raise InvalidArgument("parameter manifest does not match the network layout")
    for (_, a), (_, shape) in zip(expected.arrays(), header["manifest"]):
        n = int(np.prod(shape))
        if off + 4 * n > len(buf):
            raise InvalidArgument("truncated parameter file")
        a[...] = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(shape)
        off += 4 * n
    if off != len(buf):
        raise InvalidArgument("trailing bytes in parameter file")
    return expected


def save_params(params: NetworkParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> NetworkParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
