"""Synthetic datasets and the desk-scale benchmark shared by the CLI and tests.

A dataset is a list of cases; each holds the phantom, its full-view
sinogram, the undersampled sinogram and the reference image (FBP of the
full-view data, as used for scoring).
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .analytic import FbpConfig, fbp
from .core import (HU_CONVENTION, Grid, Image, SamplingPattern, Sinogram, add_poisson_noise,
                   apply_sampling, fan_beam, file_digest, load_image, load_sinogram,
                   make_ellipse_phantom, make_shepp_logan, mu_to_hu, save_image, save_sinogram)
from .errors import InvalidArgument, StaleDataset
from .evalcost import rmse, ssim_liver
from .iterative import reconstruct_tv, sweep_beta
from .nn.unet import UNetSpec, make_identity_params
from .projector import forward_project
from .trainer import TrainConfig, UnrollChain, greedy_train, make_case, reconstruct_unrolled

log = logging.getLogger(__name__)

PHANTOMS = ("ellipse", "shepp_logan")


@dataclass(frozen=True)
class SimConfig:
    phantom: str = "ellipse"
    train_count: int = 20
    test_count: int = 5
    seed: int = 0
    grid: int = 128
    spacing: float = 2.0
    n_ellipses: int = 8
    n_views: int = 144
    dso: float = 500.0
    dsd: float = 1000.0
    pattern: str = "sparse:4"
    I0: float = math.inf

    def __post_init__(self):
        if self.phantom not in PHANTOMS:
            raise InvalidArgument(f"phantom must be one of {PHANTOMS}")
        if self.train_count < 0 or self.test_count < 0 or self.train_count + self.test_count < 1:
            raise InvalidArgument("need at least one case")
        if self.grid < 16 or self.n_views < 2:
            raise InvalidArgument("grid must be >= 16 and n_views >= 2")

    def grid_obj(self) -> Grid:
        return Grid.centered((self.grid, self.grid), self.spacing)

    def geometry(self):
        return fan_beam(self.n_views, self.grid_obj(), dso=self.dso, dsd=self.dsd)


@dataclass
class CaseData:
    id: str
    split: str
    phantom: Image
    full: Sinogram
    sampled: Sinogram
    ref: Image


def _phantom(cfg: SimConfig, seed: int) -> Image:
    if cfg.phantom == "shepp_logan":
        return make_shepp_logan(cfg.grid, cfg.spacing)
    return make_ellipse_phantom(seed, cfg.grid, cfg.n_ellipses, spacing=cfg.spacing)


def simulate_cases(cfg: SimConfig, fbp_cfg: FbpConfig = FbpConfig()) -> List[CaseData]:
    grid = cfg.grid_obj()
    geom = cfg.geometry()
    pattern = SamplingPattern.parse(cfg.pattern, geom)
    out = []
    splits = [("train", i) for i in range(cfg.train_count)] + \
             [("test", i) for i in range(cfg.test_count)]
    for split, i in splits:
        seed = cfg.seed * 100_000 + (50_000 if split == "test" else 0) + i
        ph = _phantom(cfg, seed)
        full = add_poisson_noise(forward_project(ph, geom), cfg.I0, seed)
        ref = fbp(full, grid, fbp_cfg)
        out.append(CaseData(f"{split}_{i:03d}", split, ph, full, apply_sampling(full, pattern), ref))
    return out


# --------------------------------------------------------------------------
# on-disk datasets
# --------------------------------------------------------------------------

ROLES = ("phantom", "full", "sampled", "ref")


def write_dataset(cases: Sequence[CaseData], out_dir, config: dict) -> Path:
    """``cases/<id>_<role>.*`` files plus ``manifest.json`` with SHA-256 hashes."""
    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    entries, hashes = [], {}
    for c in cases:
        files = {}
        for role in ROLES:
            stem = out / "cases" / f"{c.id}_{role}"
            obj = getattr(c, role)
            if isinstance(obj, Image):
                save_image(obj, stem)
            else:
                save_sinogram(obj, stem)
            rel = sorted(str(p.relative_to(out)) for p in stem.parent.glob(stem.name + ".*"))
            files[role] = rel
            for r in rel:
                hashes[r] = file_digest(out / r)
        entries.append({"id": c.id, "split": c.split, "files": files})
    manifest = {"version": 1, "hu_convention": HU_CONVENTION, "config": config,
                "cases": entries, "hashes": hashes}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_manifest(ds_dir) -> dict:
    path = Path(ds_dir) / "manifest.json"
    if not path.is_file():
        raise StaleDataset(f"no manifest in {ds_dir}")
    return json.loads(path.read_text())


def verify_dataset(ds_dir) -> dict:
    """Check every listed file against its recorded hash."""
    ds = Path(ds_dir)
    manifest = read_manifest(ds)
    for rel, digest in manifest["hashes"].items():
        p = ds / rel
        if not p.is_file():
            raise StaleDataset(f"dataset file missing: {rel}")
        if file_digest(p) != digest:
            raise StaleDataset(f"hash mismatch for {rel}; re-run simulate")
    return manifest


def read_dataset(ds_dir, split: Optional[str] = None) -> List[CaseData]:
    ds = Path(ds_dir)
    manifest = verify_dataset(ds)
    out = []
    for e in manifest["cases"]:
        if split not in (None, "all") and e["split"] != split:
            continue
        stem = ds / "cases" / e["id"]
        out.append(CaseData(e["id"], e["split"], load_image(f"{stem}_phantom"),
                            load_sinogram(f"{stem}_full"), load_sinogram(f"{stem}_sampled"),
                            load_image(f"{stem}_ref")))
    return out


def dataset_inputs(ds_dir) -> List[Path]:
    ds = Path(ds_dir)
    return [ds / rel for rel in sorted(read_manifest(ds)["hashes"])]


# --------------------------------------------------------------------------
# methods
# --------------------------------------------------------------------------

def training_cases(cases: Sequence[CaseData], fbp_cfg: FbpConfig = FbpConfig()):
    return [make_case(c.sampled, c.ref, fbp_cfg) for c in cases]


def identity_chain(spec: UNetSpec, N: int, M: int, fbp_cfg: FbpConfig = FbpConfig()) -> UnrollChain:
    p = make_identity_params(spec)
    return UnrollChain(spec, M, [p] * N, [0.0] * (N + 1), [True] * N, [[] for _ in range(N)],
                       {"N": N, "M": M, "identity": True}, fbp_cfg)


def heldout_trace(chain: UnrollChain, cases: Sequence[CaseData]):
    """RMSE (HU) of x^(0..N) for each case, shape (n_cases, N + 1), and the final images."""
    rows, finals = [], []
    for c in cases:
        trace = []
        reconstruct_unrolled(c.sampled, c.ref.grid, chain, trace=trace)
        rows.append([rmse(x, c.ref) for x in trace])
        finals.append(trace[-1])
    return np.asarray(rows), finals


def tv_sweep(cases: Sequence[CaseData], betas, n_iters: int, M: int,
             fbp_cfg: FbpConfig = FbpConfig()):
    """Best beta by mean RMSE; returns (beta, {beta: mean rmse}, best images)."""
    grid = cases[0].ref.grid
    best, scores, recs = sweep_beta([(c.sampled, c.ref.data) for c in cases], grid, betas,
                                    n_iters, M, fbp_cfg=fbp_cfg)
    imgs = [Image(r, grid.spacing, grid.origin) for r in recs[best]]
    return best, scores, imgs


def reconstruct_case(c: CaseData, method: str, fbp_cfg: FbpConfig = FbpConfig(),
                     chain: Optional[UnrollChain] = None, beta: float = 0.1,
                     tv_iters: int = 50, tv_M: int = 8) -> Image:
    grid = c.ref.grid
    if method == "fbp":
        return fbp(c.sampled, grid, fbp_cfg)
    if method == "tv":
        x = reconstruct_tv(c.sampled, grid, beta, tv_iters, tv_M, fbp_cfg=fbp_cfg)
        return Image(mu_to_hu(x), grid.spacing, grid.origin)
    if method == "unrolled":
        if chain is None:
            raise InvalidArgument("method=unrolled needs a trained chain")
        return reconstruct_unrolled(c.sampled, grid, chain)
    raise InvalidArgument(f"unknown method {method!r}")


def score(img: Image, ref: Image):
    return rmse(img, ref), ssim_liver(img, ref)


@dataclass
class BenchmarkResult:
    pattern: str
    fbp_rmse: float
    tv_rmse: float
    tv_beta: float
    unrolled_rmse_per_unroll: list          # mean held-out RMSE of x^(0..N)
    train_losses: list
    safeguarded: list
    chain: UnrollChain = field(repr=False, default=None)
    seconds: float = 0.0

    @property
    def unrolled_rmse(self) -> float:
        return self.unrolled_rmse_per_unroll[-1]


def run_benchmark(sim: SimConfig, spec: UNetSpec, hp: TrainConfig, N: int = 4, M: int = 8,
                  tv_betas=(0.0, 1e-3, 1e-2, 1e-1, 1.0), tv_iters: int = 50, tv_M: int = 8,
                  fbp_cfg: FbpConfig = FbpConfig(), cases: Optional[List[CaseData]] = None,
                  with_tv: bool = True) -> BenchmarkResult:
    """Train on the train split, score FBP, swept TV and the unrolled chain on the test split."""
    t0 = time.perf_counter()
    cases = cases if cases is not None else simulate_cases(sim, fbp_cfg)
    train = [c for c in cases if c.split == "train"]
    test = [c for c in cases if c.split == "test"]
    if not train or not test:
        raise InvalidArgument("benchmark needs train and test cases")
    chain = greedy_train(training_cases(train, fbp_cfg), N, M, spec, hp, fbp_cfg)
    trace, _ = heldout_trace(chain, test)
    per_unroll = trace.mean(axis=0).tolist()
    tv_rmse, beta = float("nan"), float("nan")
    if with_tv:
        beta, scores, _ = tv_sweep(test, tv_betas, tv_iters, tv_M, fbp_cfg)
        tv_rmse = scores[beta]
    return BenchmarkResult(sim.pattern, per_unroll[0], tv_rmse, beta, per_unroll,
                           list(chain.losses), list(chain.safeguarded), chain,
                           time.perf_counter() - t0)
