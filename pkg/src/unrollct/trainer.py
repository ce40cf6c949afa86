"""Greedy, unroll-by-unroll training of the two-channel network.

Each unroll n takes the current images x^(n-1), perturbs them with one OS-SQS
pass to get y^(n-1), fits a fresh network on patches so that
``f(x, y) ~ x_ref``, and predicts x^(n) over whole images by tiling. If a
trained network would raise the full-image training loss, the identity
parameters replace it, so the recorded loss never increases.

Networks see HU/1000; everything outside this module stays in HU.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .analytic import FbpConfig, fbp
from .core import Grid, Image, Sinogram, file_digest, hu_to_mu, mu_to_hu
from .errors import InvalidArgument, NumericalFailure
from .iterative import OsSqsState, os_sqs_sweep
from .nn.adam import AdamState, adam_step
from .nn.unet import (Cache, NetworkParams, UNetSpec, load_params,
                      make_identity_params, receptive_field, save_params, unet_backward,
                      unet_residual)
from .projector import partition_subsets, sqs_denominator

log = logging.getLogger(__name__)

HU_SCALE = 1000.0


@lru_cache(maxsize=None)
def _rf(spec: UNetSpec) -> int:
    return receptive_field(spec)


def _align_up(v: int, a: int) -> int:
    return -(-v // a) * a


# --------------------------------------------------------------------------
# training cases and the OS-SQS perturbation
# --------------------------------------------------------------------------

@dataclass
class TrainingCase:
    sino: Sinogram
    x_ref: Image
    x_current: Image
    y_current: Optional[Image] = None
    weights: Optional[np.ndarray] = None
    _denom: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.x_ref.shape != self.x_current.shape:
            raise InvalidArgument("x_ref and x_current must share a grid")
        if self.y_current is not None and self.y_current.shape != self.x_ref.shape:
            raise InvalidArgument("y_current must share the reference grid")
        if self.weights is not None and np.shape(self.weights) != self.sino.data.shape:
            raise InvalidArgument("weights shape does not match sinogram")

    @property
    def geom(self):
        return self.sino.geometry

    @property
    def grid(self) -> Grid:
        return self.x_ref.grid

    def ray_weights(self) -> np.ndarray:
        return self.sino.weights_or_ones() if self.weights is None else np.asarray(self.weights)

    def denominator(self) -> np.ndarray:
        if self._denom is None:
            self._denom = sqs_denominator(self.geom, self.grid, self.ray_weights())
        return self._denom


def make_case(sino: Sinogram, x_ref: Image, fbp_cfg: FbpConfig = FbpConfig(),
              weights=None) -> TrainingCase:
    """A case whose starting image x^(0) is the FBP of ``sino``."""
    x0 = fbp(sino, x_ref.grid, fbp_cfg)
    return TrainingCase(sino, x_ref, x0, weights=weights)


def ossqs_perturb(case: TrainingCase, M: int) -> Image:
    """One full OS-SQS pass (M sub-iterations) started from ``case.x_current``."""
    grid = case.grid
    state = OsSqsState(hu_to_mu(case.x_current.data), case.denominator(),
                       partition_subsets(case.sino.n_views, M), grid, case.ray_weights())
    y = os_sqs_sweep(state, case.sino)
    return Image(mu_to_hu(y), grid.spacing, grid.origin)


# --------------------------------------------------------------------------
# patch plans
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchPlan:
    """Input windows P and output windows E, as tuples of per-axis slices.

    ``E`` windows tile the image ``coverage`` times. Each ``E`` sits
    ``margin`` (rounded up to ``align``) inside its ``P`` unless ``P`` is
    clamped at the image edge, and every ``P`` starts on a multiple of ``align``.
    """

    shape: tuple
    patch_size: tuple
    margin: int
    align: int
    coverage: int
    windows: tuple

    def coverage_map(self) -> np.ndarray:
        c = np.zeros(self.shape, dtype=np.int64)
        for _, e in self.windows:
            c[e] += 1
        return c

    def local_e(self, p, e):
        """E expressed in P's local coordinates."""
        return tuple(slice(es.start - ps.start, es.stop - ps.start) for ps, es in zip(p, e))


def _axis_windows(n, e, r_al, offset):
    out = []
    start = offset - e if offset > 0 else 0
    while start < n:
        e0, e1 = max(0, start), min(n, start + e)
        if e1 > e0:
            out.append((slice(max(0, e0 - r_al), min(n, e1 + r_al)), slice(e0, e1)))
        start += e
    return out


def plan_patches(grid, patch_size, margin: int, seed: Optional[int] = None, align: int = 1,
                 coverage: int = 1) -> PatchPlan:
    """Tile ``grid`` (a Grid or a shape) with constant-coverage output windows.

    With a seed, each of the ``coverage`` tilings is cyclically shifted by a
    random multiple of ``align``, which keeps the coverage count exact.
    """
    shape = tuple(grid.shape) if isinstance(grid, Grid) else tuple(int(n) for n in grid)
    d = len(shape)
    ps = (int(patch_size),) * d if np.isscalar(patch_size) else tuple(int(p) for p in patch_size)
    if len(ps) != d:
        raise InvalidArgument("patch_size must have one entry per axis")
    if margin < 0 or align < 1 or coverage < 1:
        raise InvalidArgument("margin must be >= 0, align and coverage >= 1")
    if any(n % align for n in shape):
        raise InvalidArgument(f"image shape {shape} must be divisible by {align}")
    r_al = _align_up(margin, align)
    es = []
    for p in ps:
        if p < 2 * margin + 2:
            raise InvalidArgument(f"patch size {p} too small for margin {margin}")
        if p % align:
            raise InvalidArgument(f"patch size {p} must be divisible by {align}")
        if p - 2 * r_al < align:
            raise InvalidArgument(f"patch size {p} leaves no output window at margin {r_al}")
        es.append(p - 2 * r_al)
    rng = np.random.default_rng(seed) if seed is not None else None
    windows = []
    for _ in range(coverage):
        per_axis = []
        for n, e in zip(shape, es):
            off = 0 if rng is None else int(rng.integers(0, e // align)) * align
            per_axis.append(_axis_windows(n, e, r_al, off))
        for combo in itertools.product(*per_axis):
            windows.append((tuple(c[0] for c in combo), tuple(c[1] for c in combo)))
    return PatchPlan(shape, ps, int(margin), int(align), int(coverage), tuple(windows))


# --------------------------------------------------------------------------
# prediction
# --------------------------------------------------------------------------

def predict_tiled(x: Image, y: Image, params: NetworkParams, plan: PatchPlan) -> Image:
    """Evaluate the network window by window and keep each E region."""
    spec = params.spec
    if x.shape != y.shape or tuple(plan.shape) != x.shape:
        raise InvalidArgument("x, y and the patch plan must share one shape")
    if plan.margin < _rf(spec):
        raise InvalidArgument(
            f"plan margin {plan.margin} is below the receptive field {_rf(spec)}")
    if plan.align % spec.multiple:
        raise InvalidArgument(f"plan alignment must be a multiple of {spec.multiple}")
    xd = np.asarray(x.data)
    if params.is_identity():
        return x
    xn = xd / HU_SCALE
    yn = np.asarray(y.data) / HU_SCALE
    out = np.array(xd, dtype=np.float64)
    for p, e in plan.windows:
        res = unet_residual(xn[p], yn[p], params)
        out[e] = xd[e] + HU_SCALE * res[plan.local_e(p, e)]
    return Image(out, x.spacing, x.origin)


def inference_plan(shape, spec: UNetSpec, patch: int) -> PatchPlan:
    """Seam-free plan with margin equal to the receptive field."""
    m = spec.multiple
    r = _rf(spec)
    patch = max(_align_up(patch, m), 2 * _align_up(r, m) + m)
    return plan_patches(shape, patch, r, None, m)


def predict_full(x: Image, y: Image, params: NetworkParams, patch: int = 256) -> Image:
    return predict_tiled(x, y, params, inference_plan(x.shape, params.spec, patch))


def image_loss(xs: Sequence[Image], refs: Sequence[Image]) -> float:
    """``sum_i ||x_i - x_ref_i||^2`` in HU/1000 units."""
    total = 0.0
    for x, r in zip(xs, refs):
        d = np.asarray(x.data) / HU_SCALE - np.asarray(r.data) / HU_SCALE
        total += float(np.sum(d * d))
    return total


# --------------------------------------------------------------------------
# training one unroll
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 1e-3
    minibatch: int = 8
    seed: int = 0
    flips: bool = True
    patch_size: int = 64
    train_margin: Optional[int] = None   # defaults to the receptive field
    predict_patch: int = 256
    warm_start: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.minibatch < 1:
            raise InvalidArgument("epochs must be >= 0 and minibatch >= 1")
        if not self.lr > 0:
            raise InvalidArgument("lr must be > 0")


def train_unroll(cases: Sequence[TrainingCase], spec: UNetSpec, hp: TrainConfig,
                 init: Optional[NetworkParams] = None, unroll: int = 1):
    """Fit one network on the patches of every case; returns (params, epoch losses).

    Training starts from the identity network (standard initialization with a
    zeroed head) unless ``init`` is given, so the first step already begins at
    the previous iterate's loss. The per-epoch loss is the mean squared
    E-window error in HU/1000 units.
    Gradients are accumulated patch by patch in a fixed order, so a run is
    reproducible for a fixed seed and thread count.
    """
    if not cases:
        raise InvalidArgument("no training cases")
    for c in cases:
        if c.y_current is None:
            raise InvalidArgument("training cases need y_current (run ossqs_perturb first)")
    margin = _rf(spec) if hp.train_margin is None else hp.train_margin
    params = init.copy() if init is not None else make_identity_params(spec, hp.seed * 1000 + unroll)
    adam = AdamState(lr=hp.lr)
    data = [(np.asarray(c.x_current.data) / HU_SCALE, np.asarray(c.y_current.data) / HU_SCALE,
             np.asarray(c.x_ref.data) / HU_SCALE) for c in cases]
    history = []
    for epoch in range(hp.epochs):
        rng = np.random.default_rng([hp.seed, unroll, epoch])
        items = []
        for ci, (xn, _, _) in enumerate(data):
            plan = plan_patches(xn.shape, hp.patch_size, margin, int(rng.integers(2 ** 31)),
                                spec.multiple)
            items += [(ci, p, plan.local_e(p, e)) for p, e in plan.windows]
        order = rng.permutation(len(items))
        sse = 0.0
        npix = 0
        for b0 in range(0, len(order), hp.minibatch):
            grads = None
            b_sse, b_pix = 0.0, 0
            for k in order[b0:b0 + hp.minibatch]:
                ci, p, le = items[k]
                xn, yn, tn = data[ci]
                xp, yp, tp = xn[p], yn[p], tn[p]
                mask = np.zeros(xp.shape)
                mask[le] = 1.0
                if hp.flips:
                    axes = tuple(a for a in range(xp.ndim) if rng.random() < 0.5)
                    if axes:
                        xp, yp, tp, mask = (np.flip(a, axes) for a in (xp, yp, tp, mask))
                cache = Cache()
                res = unet_residual(xp, yp, params, cache)
                diff = (xp + res - tp) * mask
                b_sse += float(np.sum(diff * diff))
                b_pix += int(mask.sum())
                g = unet_backward(params, cache, 2.0 * diff)
                if grads is None:
                    grads = g
                else:
                    for name, (gw, gb) in g.items():
                        grads[name][0][...] += gw
                        grads[name][1][...] += gb
            if not math.isfinite(b_sse):
                raise NumericalFailure(
                    f"non-finite training loss at unroll {unroll}, epoch {epoch}, batch {b0 // hp.minibatch}")
            scale = 1.0 / max(b_pix, 1)
            for gw, gb in grads.values():
                gw *= scale
                gb *= scale
            adam_step(params, grads, adam)
            sse += b_sse
            npix += b_pix
        history.append(sse / max(npix, 1))
        log.debug("unroll %d epoch %d loss %.3e", unroll, epoch, history[-1])
    return params.round_to_f32(), history


# --------------------------------------------------------------------------
# the greedy loop
# --------------------------------------------------------------------------

@dataclass
class UnrollChain:
    spec: UNetSpec
    M: int
    params: List[NetworkParams] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)      # index 0 is x^(0)
    safeguarded: List[bool] = field(default_factory=list)
    histories: List[list] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    fbp_cfg: FbpConfig = FbpConfig()
    predict_patch: int = 256
    interrupted: bool = False

    @property
    def n_unrolls(self) -> int:
        return len(self.params)


def _advance(x: Image, y: Image, params: NetworkParams, patch: int) -> Image:
    return predict_full(x, y, params, patch)


def greedy_train(cases: Sequence[TrainingCase], N: int, M: int, spec: UNetSpec,
                 hp: TrainConfig = TrainConfig(), fbp_cfg: FbpConfig = FbpConfig(),
                 on_unroll=None) -> UnrollChain:
    """Train N unrolls in sequence; ``cases`` must start from FBP images.

    ``on_unroll(n, chain, cases)`` is called after each completed unroll. On
    KeyboardInterrupt the chain built so far is returned (flagged
    ``interrupted``) if at least one unroll finished.
    """
    if N < 1:
        raise InvalidArgument("N must be >= 1")
    if not cases:
        raise InvalidArgument("no training cases")
    cases = list(cases)
    chain = UnrollChain(spec, M, config=dict(asdict(hp), N=N, M=M, **asdict(spec)),
                        fbp_cfg=fbp_cfg, predict_patch=hp.predict_patch)
    refs = [c.x_ref for c in cases]
    prev = image_loss([c.x_current for c in cases], refs)
    chain.losses.append(prev)
    last = None
    try:
        for n in range(1, N + 1):
            cases = [replace(c, y_current=ossqs_perturb(c, M), _denom=c.denominator())
                     for c in cases]
            init = last if (hp.warm_start and last is not None and not last.is_identity()) else None
            params, hist = train_unroll(cases, spec, hp, init=init, unroll=n)
            xs = [_advance(c.x_current, c.y_current, params, hp.predict_patch) for c in cases]
            loss = image_loss(xs, refs)
            guarded = loss > prev
            if guarded:
                log.info("unroll %d: loss %.4g > %.4g, keeping the identity network", n, loss, prev)
                params = make_identity_params(spec, hp.seed)
                xs = [_advance(c.x_current, c.y_current, params, hp.predict_patch) for c in cases]
                loss = image_loss(xs, refs)
            cases = [replace(c, x_current=x) for c, x in zip(cases, xs)]
            chain.params.append(params)
            chain.losses.append(loss)
            chain.safeguarded.append(guarded)
            chain.histories.append(hist)
            prev = loss
            last = params
            log.info("unroll %d/%d: full-image loss %.4g", n, N, loss)
            if on_unroll is not None:
                on_unroll(n, chain, cases)
    except KeyboardInterrupt:
        if chain.n_unrolls == 0:
            raise
        chain.interrupted = True
    return chain


def reconstruct_unrolled(sino: Sinogram, grid: Grid, chain: UnrollChain, weights=None,
                         trace: Optional[list] = None) -> Image:
    """x^(0) = FBP, then x^(n) = f(x^(n-1), y^(n-1); theta^(n)) for every unroll.

    Intermediate images x^(0..N) are appended to ``trace`` when given.
    """
    x = fbp(sino, grid, chain.fbp_cfg)
    case = TrainingCase(sino, x, x, weights=weights)
    if trace is not None:
        trace.append(x)
    for params in chain.params:
        case = replace(case, x_current=x)
        y = ossqs_perturb(case, chain.M)
        x = _advance(x, y, params, chain.predict_patch)
        if trace is not None:
            trace.append(x)
    return x


# --------------------------------------------------------------------------
# run directory
# --------------------------------------------------------------------------

def write_run(chain: UnrollChain, out_dir, case_files: Sequence = ()) -> Path:
    """Config snapshot, one parameter file per unroll, loss CSV and a hashed manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dict(chain.config, fbp=asdict(chain.fbp_cfg), predict_patch=chain.predict_patch,
               n_unrolls=chain.n_unrolls, interrupted=chain.interrupted,
               safeguarded=chain.safeguarded)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    files = []
    for n, p in enumerate(chain.params, 1):
        f = out / f"unroll_{n:02d}.params"
        save_params(p, f)
        files.append(f)
    with open(out / "losses.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["unroll", "epoch", "train_loss", "full_image_loss"])
        wr.writerow([0, "", "", repr(chain.losses[0])])
        for n, hist in enumerate(chain.histories, 1):
            for ep, tl in enumerate(hist):
                last = ep == len(hist) - 1
                wr.writerow([n, ep, repr(tl), repr(chain.losses[n]) if last else ""])
            if not hist:
                wr.writerow([n, "", "", repr(chain.losses[n])])
    manifest = {
        "inputs": {str(f): file_digest(f) for f in case_files},
        "outputs": {f.name: file_digest(f) for f in files + [out / "config.json", out / "losses.csv"]},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_run(run_dir) -> UnrollChain:
    run = Path(run_dir)
    cfg = json.loads((run / "config.json").read_text())
    spec = UNetSpec(cfg["depth"], cfg["base_channels"], cfg["ndim"], cfg["kernel"],
                    cfg["in_channels"])
    params = [load_params(run / f"unroll_{n:02d}.params") for n in range(1, cfg["n_unrolls"] + 1)]
    losses = {}
    with open(run / "losses.csv") as fh:
        for row in csv.DictReader(fh):
            if row["full_image_loss"]:
                losses[int(row["unroll"])] = float(row["full_image_loss"])
    return UnrollChain(spec, cfg["M"], params, [losses[n] for n in sorted(losses)],
                       list(cfg.get("safeguarded", [])), [], cfg, FbpConfig(**cfg["fbp"]),
                       cfg["predict_patch"], cfg.get("interrupted", False))
