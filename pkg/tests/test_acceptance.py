"""Acceptance suite: one marker per criterion, one summary line per criterion.

The desk-scale experiments (criteria 5 to 7) train several greedy chains on a
single CPU and take tens of minutes. Artifacts (sweep CSVs, cost samples,
per-unroll RMSE tables) are written to ``acceptance_results/`` at the
repository root.
"""
import csv
import json
import math
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from oracles import ci_coverage, dense_system_matrix, ssim_bruteforce, unet_fd_check
from unrollct.core import Grid, Image, Sinogram, fan_beam
from unrollct.evalcost import (ComplexityInputs, ci_difference, fit_cost_model,
                               measure_training_cost, memory_ratio, rmse,
                               ssim_liver, volume_factor, write_cost_csv)
from unrollct.experiment import SimConfig, heldout_trace, run_benchmark, simulate_cases
from unrollct.iterative import make_state, os_sqs_sweep, weighted_data_cost
from unrollct.nn import UNetSpec, featuremap_bytes, init_params, receptive_field
from unrollct.nn.unet import unet_residual
from unrollct.projector import backproject, project
from unrollct.trainer import (HU_SCALE, TrainConfig, TrainingCase, greedy_train, inference_plan,
                              make_case, plan_patches, predict_tiled)

OUT = Path(__file__).resolve().parent.parent / "acceptance_results"

DESK_SPEC = UNetSpec(depth=2, base_channels=8)
DESK_HP = TrainConfig(epochs=20, lr=1e-3, minibatch=8, seed=0, flips=True, patch_size=64,
                      train_margin=8, predict_patch=256)
DESK_N, DESK_M = 4, 8


def _out():
    OUT.mkdir(exist_ok=True)
    return OUT


def _random_params(spec, seed):
    p = init_params(spec, seed)
    rng = np.random.default_rng(seed + 1)
    for _, layer in p.layers.items():
        layer.bias[...] = rng.normal(scale=0.05, size=layer.bias.shape)
    return p


# ---------------------------------------------------------------------------
# 1. projector
# ---------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c1_projector(note):
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(2024)
    for i in range(100):
        n = int(rng.choice([8, 16, 24, 32]))
        grid = Grid.centered((n, n), float(rng.uniform(0.5, 2.0)))
        geom = fan_beam(int(rng.integers(1, 17)), grid, start=float(rng.uniform(0, 2 * np.pi)))
        x = rng.normal(size=grid.shape)
        y = rng.normal(size=(geom.n_views, geom.n_det))
        Ax = project(x, grid, geom)
        mismatch = abs(np.vdot(Ax, y) - np.vdot(x, backproject(y, grid, geom)))
        worst = max(worst, mismatch / (np.linalg.norm(Ax) * np.linalg.norm(y)))
    dense_err = 0.0
    for seed in range(3):
        grid = Grid.centered((16, 16), 1.0 + 0.25 * seed)
        geom = fan_beam(8, grid, start=0.4 * seed)
        A = dense_system_matrix(geom, grid)
        x = np.random.default_rng(seed).uniform(0, 1, grid.shape)
        ref = A @ x.ravel()
        dense_err = max(dense_err, np.max(np.abs(project(x, grid, geom).ravel() - ref)) / np.max(np.abs(ref)))
    secs = time.perf_counter() - t0
    note(f"adjoint mismatch max {worst:.2e} (<1e-9), dense oracle {dense_err:.2e} (<1e-10), {secs:.1f}s")
    assert worst < 1e-9
    assert dense_err < 1e-10
    assert secs < 30


# ---------------------------------------------------------------------------
# 2. full-network gradients
# ---------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_unet_gradients(note):
    t0 = time.perf_counter()
    spec = DESK_SPEC
    params = _random_params(spec, 7)
    rng = np.random.default_rng(8)
    x, y, target = rng.normal(size=(3, 16, 16))
    rows, skipped = unet_fd_check(params, x, y, target, 50, h=1e-4, seed=9)
    worst = max(r[4] for r in rows)
    layers = {r[0].split(".")[0] for r in rows}
    secs = time.perf_counter() - t0
    note(f"{len(rows)} parameters over {len(layers)} layers, max rel err {worst:.2e} (<1e-4), "
         f"{skipped} draws skipped at ReLU kinks, {secs:.1f}s")
    assert len(rows) >= 50
    assert worst < 1e-4
    assert secs < 120


# ---------------------------------------------------------------------------
# 3. patch equivalence
# ---------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_c3_patch_equivalence(note):
    t0 = time.perf_counter()
    spec = DESK_SPEC
    params = _random_params(spec, 3)
    rng = np.random.default_rng(4)
    x = Image(rng.normal(0, 300, (96, 96)), 1.0)
    y = Image(x.data + rng.normal(0, 30, x.shape), 1.0)
    ref = rng.normal(0, 300, x.shape)
    r = receptive_field(spec)
    plan = inference_plan(x.shape, spec, 64)
    assert plan.margin == r
    xn, yn, tn = x.data / HU_SCALE, y.data / HU_SCALE, ref / HU_SCALE
    whole = xn + unet_residual(xn, yn, params)
    tiled = predict_tiled(x, y, params, plan).data / HU_SCALE
    diff = np.max(np.abs(tiled - whole)) * HU_SCALE
    worst = 0.0
    for C in (1, 2, 3):
        plan = plan_patches(x.shape, 64, r, seed=C, align=spec.multiple, coverage=C)
        cov = plan.coverage_map()
        assert cov.min() == cov.max() == C
        total = 0.0
        for p, e in plan.windows:
            out = xn[p] + unet_residual(xn[p], yn[p], params)
            total += float(np.sum((out[plan.local_e(p, e)] - tn[e]) ** 2))
        full = C * float(np.sum((whole - tn) ** 2))
        worst = max(worst, abs(total - full) / full)
    secs = time.perf_counter() - t0
    note(f"receptive field {r}px, tiled vs whole max diff {diff:.1e} HU (<1e-10), "
         f"patch/whole loss rel err {worst:.1e} for C=1..3 (<1e-10), {secs:.1f}s")
    assert diff < 1e-10
    assert worst < 1e-10
    assert secs < 60


# ---------------------------------------------------------------------------
# 4. SQS update
# ---------------------------------------------------------------------------

@pytest.mark.criterion(4)
def test_c4_sqs(note):
    t0 = time.perf_counter()
    grid = Grid.centered((16, 16), 1.5)
    geom = fan_beam(8, grid, start=0.2)
    A = dense_system_matrix(geom, grid)
    rng = np.random.default_rng(5)
    x_true = rng.uniform(0, 0.03, grid.shape)
    sino = Sinogram(project(x_true, grid, geom), geom)

    x0 = rng.uniform(0, 0.03, grid.shape)
    d = A.T @ (A @ np.ones(A.shape[1]))
    on = d > 0
    oracle = x0.ravel().copy()
    oracle[on] -= (A.T @ (A @ x0.ravel() - sino.data.ravel()))[on] / d[on]
    got = os_sqs_sweep(make_state(sino, grid, 1, x0), sino).ravel()
    step_err = np.max(np.abs(got - oracle)) / np.max(np.abs(oracle))

    w = rng.uniform(0.2, 1.0, sino.data.shape)
    st = make_state(sino, grid, 1, np.zeros(grid.shape), w)
    costs = [weighted_data_cost(st.x, sino, grid, w)]
    for _ in range(20):
        os_sqs_sweep(st, sino)
        costs.append(weighted_data_cost(st.x, sino, grid, w))
    monotone = all(b <= a for a, b in zip(costs, costs[1:]))

    fp = 0.0
    for M in (1, 2, 4, 8):
        st = make_state(sino, grid, M, x_true)
        for _ in range(3):
            out = os_sqs_sweep(st, sino)
            fp = max(fp, np.max(np.abs(out - x_true)) / np.max(np.abs(x_true)))
    secs = time.perf_counter() - t0
    note(f"M=1 vs dense SQS {step_err:.1e} (<1e-9), 20-sweep cost monotone={monotone} "
         f"({costs[0]:.3g} -> {costs[-1]:.3g}), fixed point {fp:.1e} (<1e-12), {secs:.1f}s")
    assert step_err < 1e-9
    assert monotone
    assert fp < 1e-12
    assert secs < 60


# ---------------------------------------------------------------------------
# desk-scale experiments shared by 5, 6 and 7
# ---------------------------------------------------------------------------

def _sim(pattern):
    return SimConfig(pattern=pattern, train_count=20, test_count=5, seed=0, grid=128,
                     spacing=2.0, n_views=144)


@pytest.fixture(scope="session")
def desk_cases():
    return {p: simulate_cases(_sim(p)) for p in ("sparse:4", "limited:150")}


_BENCH = {}


def _bench(desk_cases, pattern, spec=DESK_SPEC, M=DESK_M, with_tv=True):
    key = (pattern, spec.depth, spec.base_channels, M)
    if key not in _BENCH:
        _BENCH[key] = run_benchmark(_sim(pattern), spec, DESK_HP, N=DESK_N, M=M,
                                    cases=desk_cases[pattern], with_tv=with_tv)
    return _BENCH[key]


def _write_trace(name, res):
    with open(_out() / name, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["unroll", "heldout_rmse_hu", "train_loss", "safeguarded"])
        for n, v in enumerate(res.unrolled_rmse_per_unroll):
            wr.writerow([n, repr(v), repr(res.train_losses[n]),
                         "" if n == 0 else res.safeguarded[n - 1]])


@pytest.mark.slow
@pytest.mark.criterion(6)
@pytest.mark.parametrize("pattern", ["sparse:4", "limited:150"])
def test_c6_desk_benchmark(desk_cases, pattern, note):
    res = _bench(desk_cases, pattern)
    per = res.unrolled_rmse_per_unroll
    gain = 1 - res.unrolled_rmse / res.fbp_rmse
    _write_trace(f"desk_{pattern.replace(':', '')}.csv", res)
    note(f"{pattern}: FBP {res.fbp_rmse:.1f}, TV(beta={res.tv_beta:g}) {res.tv_rmse:.1f}, "
         f"unrolled " + "/".join(f"{v:.1f}" for v in per[1:]) + f" HU ({100 * gain:.0f}% below FBP), "
         f"{res.seconds / 60:.1f} min")
    assert gain >= 0.30
    assert res.unrolled_rmse < res.tv_rmse
    assert per[4] < per[1]


# ---------------------------------------------------------------------------
# 7. hyperparameter sweeps
# ---------------------------------------------------------------------------

def _write_sweep(axis, rows):
    with open(_out() / f"sweep_{axis}.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["axis", "value", "heldout_rmse_hu", "train_loss", "status"])
        for v, rm, tl in rows:
            ok = math.isfinite(rm)
            wr.writerow([axis, v, repr(rm), repr(tl), "ok" if ok else "failed"])


@pytest.mark.slow
@pytest.mark.criterion(7)
def test_c7_sweeps(desk_cases, note):
    base = _bench(desk_cases, "sparse:4")
    d1 = _bench(desk_cases, "sparse:4", spec=UNetSpec(depth=1, base_channels=8), with_tv=False)
    m1 = _bench(desk_cases, "sparse:4", M=1, with_tv=False)
    _write_sweep("depth", [(1, d1.unrolled_rmse, d1.train_losses[-1]),
                           (2, base.unrolled_rmse, base.train_losses[-1])])
    _write_sweep("subsets", [(1, m1.unrolled_rmse, m1.train_losses[-1]),
                             (8, base.unrolled_rmse, base.train_losses[-1])])
    # a greedy chain's first n unrolls are the chain trained with N = n
    _write_sweep("unrolls", [(n, base.unrolled_rmse_per_unroll[n], base.train_losses[n])
                             for n in range(1, DESK_N + 1)])
    files = [f"sweep_{a}.csv" for a in ("unrolls", "subsets", "depth")]
    note(f"depth 1 {d1.unrolled_rmse:.2f} vs depth 2 {base.unrolled_rmse:.2f} HU; "
         f"subsets 1 {m1.unrolled_rmse:.2f} vs 8 {base.unrolled_rmse:.2f} HU; "
         f"wrote {', '.join(files)}")
    assert all((_out() / f).is_file() for f in files)
    assert math.isfinite(m1.unrolled_rmse)
    assert base.unrolled_rmse <= d1.unrolled_rmse


# ---------------------------------------------------------------------------
# 5. constructive monotonicity on every training run
# ---------------------------------------------------------------------------

def _check_chain(chain):
    ok = all(b <= a for a, b in zip(chain.losses, chain.losses[1:]))
    for n, guarded in enumerate(chain.safeguarded, 1):
        if guarded:
            ok &= chain.params[n - 1].is_identity() and chain.losses[n] == chain.losses[n - 1]
    return ok


@pytest.mark.criterion(5)
def test_c5_monotone_small_runs(note):
    cases = simulate_cases(SimConfig(train_count=3, test_count=0, grid=32, spacing=4.0,
                                     n_views=48, n_ellipses=3))
    tcs = [make_case(c.sampled, c.ref) for c in cases]
    hp = replace(DESK_HP, epochs=2, patch_size=16, train_margin=4, predict_patch=32)
    spec = UNetSpec(depth=1, base_channels=4)
    runs = {"regular": greedy_train(tcs, 3, 4, spec, hp),
            "diverging lr": greedy_train(tcs, 3, 4, spec, replace(hp, lr=0.5)),
            "target = input": greedy_train([replace(c, x_ref=c.x_current) for c in tcs], 2, 4, spec, hp)}
    guarded = sum(sum(ch.safeguarded) for ch in runs.values())
    note(f"{len(runs)} small runs, {guarded} safeguarded unrolls")
    assert all(_check_chain(ch) for ch in runs.values())
    assert any(runs["diverging lr"].safeguarded)


@pytest.mark.slow
@pytest.mark.criterion(5)
def test_c5_monotone_desk_runs(note):
    if not _BENCH:
        pytest.skip("no desk runs in this session")
    bad = [k for k, res in _BENCH.items() if not _check_chain(res.chain)]
    note(f"{len(_BENCH)} desk runs checked, " +
         ", ".join(f"{k[0]} d{k[1]} M{k[3]}: {sum(r.safeguarded)} guarded" for k, r in _BENCH.items()))
    assert not bad


# ---------------------------------------------------------------------------
# 8. cost model
# ---------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_c8_cost_model(note):
    n = 64
    configs = [(N, Np, Nz) for N in (1, 2, 3) for Np in (16, 32, 48) for Nz in (1, 2, 3)]
    target = (6, 96, 6)
    # Timed in a fresh interpreter, as `unrollct cost` would be: after the desk
    # runs this process carries allocator state that adds +-25% jitter. The
    # held-out target is timed inside the same shuffled passes as the grid, so
    # host speed drifting over minutes affects both alike; it stays out of the fit.
    script = ("import json, sys; from unrollct.evalcost import measure_cost_grid; "
              "c = json.loads(sys.argv[1]); "
              "print(json.dumps(measure_cost_grid(c['configs'], n=c['n'], passes=3)))")
    arg = json.dumps({"configs": configs + [target], "n": n})
    proc = subprocess.run([sys.executable, "-c", script, arg], capture_output=True, text=True,
                          check=True)
    rows = [tuple(r) for r in json.loads(proc.stdout)]
    target_row = rows.pop()
    assert target_row[:3] == target
    model = fit_cost_model([(N, Np, Nz, s) for N, Np, Nz, _, s in rows])
    pred = model.predict(*target)
    meas = target_row[4]
    rows.append(target_row)
    write_cost_csv(_out() / "cost_samples.csv", [r[:4] + (repr(r[4]),) for r in rows])
    (_out() / "cost_model.json").write_text(json.dumps(
        {"coef": model.coef, "r2": model.r2, "target": target, "predicted": pred,
         "measured": meas}, indent=2))
    err = abs(pred - meas) / meas

    spec = DESK_SPEC
    exact = True
    for patch in (16, 32, 64):
        b, _ = measure_training_cost(spec, patch, repeats=1)
        exact &= b == featuremap_bytes(spec, (patch, patch))
    b1, _ = measure_training_cost(spec, 32, 1, repeats=1)
    b4, _ = measure_training_cost(spec, 32, 4, repeats=1)
    exact &= b1 == b4
    clinical = ComplexityInputs(640, 640, 128, 96, 96, 96, 20, 20, 32, 10, 1, 736, 64, 2304)
    factor = volume_factor(clinical)
    ratio = memory_ratio(clinical)
    note(f"r2 {model.r2:.4f} (>=0.95), predicted {pred:.3f}s vs measured {meas:.3f}s at "
         f"N,Np,Nz={target} ({100 * err:.1f}% off, <25%), byte accounting exact={exact}, "
         f"image/patch factor {factor:.1f}")
    assert model.r2 >= 0.95
    assert err < 0.25
    assert exact
    assert abs(factor - 59.3) < 0.05 and factor > 50
    assert ratio == pytest.approx(1 / factor * 20 / (20 * 10))


# ---------------------------------------------------------------------------
# 9. metrics
# ---------------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_c9_metrics(note):
    i, j = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    a = 60 * np.sin(i / 2.5) + 4 * j - 40
    b = a + 30 * np.cos((i + 2 * j) / 5.0)
    b[3:10, 6:13] += 120
    oracle = ssim_bruteforce(np.clip(a, -160, 240) + 160, np.clip(b, -160, 240) + 160, 400.0)
    ssim_err = abs(ssim_liver(a, b) - oracle)

    trivial = [rmse(a, a) == 0.0, rmse(a + 10.0, a) == pytest.approx(10.0, rel=1e-14),
               ssim_liver(a, a) == 1.0]
    same = ci_difference(list(a[0]), list(a[0]))
    shifted = ci_difference(list(a[0] + 3.0), list(a[0]))
    trivial += [(same.low, same.high) == (0.0, 0.0),
                shifted.low == shifted.high == pytest.approx(3.0, abs=1e-12)]
    cover = ci_coverage(reps=500, n=1000, level=0.95, seed=0)
    note(f"SSIM vs brute force {ssim_err:.1e} (<1e-8), trivial cases {sum(trivial)}/{len(trivial)}, "
         f"CI coverage {100 * cover:.1f}% over 500 repetitions ([93, 97]%)")
    assert ssim_err < 1e-8
    assert all(trivial)
    assert 0.93 <= cover <= 0.97
