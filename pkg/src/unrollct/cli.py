"""``unrollct`` command line: simulate, reconstruct, train, sweep, cost, evaluate.

Configuration is a plain ``key = value`` file (``#`` starts a comment);
unknown keys are rejected. Every command writes its resolved configuration
and a manifest of output hashes into ``--out``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .analytic import FbpConfig
from .core import export_windowed, file_digest, save_image
from .errors import InvalidArgument, NumericalFailure, StaleDataset
from .evalcost import (ci_difference, fit_cost_model, measure_cost_grid, read_cost_csv,
                       write_cost_csv, write_metrics_csv)
from .experiment import (SimConfig, dataset_inputs, heldout_trace, identity_chain, read_dataset,
                         reconstruct_case, score, simulate_cases, training_cases,
                         verify_dataset, write_dataset)
from .nn.unet import UNetSpec
from .trainer import TrainConfig, greedy_train, read_run, write_run

log = logging.getLogger("unrollct")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

# key -> default; the default's type is the key's type
DEFAULTS = {
    # phantoms and geometry
    "phantom": "ellipse",
    "train_count": 20,
    "test_count": 5,
    "seed": 0,
    "grid": 128,
    "spacing": 2.0,
    "n_ellipses": 8,
    "n_views": 144,
    "dso": 500.0,
    "dsd": 1000.0,
    "pattern": "sparse:4",
    "I0": math.inf,
    # reconstruction
    "method": "fbp",
    "split": "all",
    "filter": "hann",
    "limited_weighting": "smooth_redundancy",
    "beta": 0.1,
    "tv_iters": 50,
    "tv_M": 8,
    "chain": "",
    "png_center": 40.0,
    "png_width": 400.0,
    # greedy training; full-scale values are N = 10, M = 32, depth 4
    "N": 4,
    "M": 8,
    "depth": 2,
    "base_channels": 8,
    "patch": 64,
    "train_margin": 8,
    "epochs": 20,
    "lr": 1e-3,
    "minibatch": 8,
    "flips": True,
    "warm_start": False,
    "predict_patch": 256,
    # sweep
    "sweep_axis": "depth",
    "sweep_values": "1,2",
    # cost model
    "cost_samples": "",
    "cost_column": "seconds",
    "cost_predict": "10:128:128",
    "cost_grid_n": "1,2,3",
    "cost_grid_np": "16,32,48",
    "cost_grid_nz": "1,2,3",
    "cost_image": 64,
    # evaluate
    "eval_a": "",
    "eval_b": "",
    "eval_level": 0.95,
}


def _coerce(key, text):
    default = DEFAULTS[key]
    t = text.strip()
    try:
        if isinstance(default, bool):
            if t.lower() in ("1", "true", "yes", "on"):
                return True
            if t.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
    except ValueError:
        raise InvalidArgument(f"config key {key!r}: cannot parse {text!r}") from None
    return t


def parse_config(text: str, base: dict = None) -> dict:
    cfg = dict(DEFAULTS if base is None else base)
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise InvalidArgument(f"config line {n}: expected key = value")
        if key not in DEFAULTS:
            raise InvalidArgument(f"config line {n}: unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in DEFAULTS)


def load_config(path, seed=None) -> dict:
    text = ""
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise InvalidArgument(f"config file not found: {path}")
        text = p.read_text()
    cfg = parse_config(text)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def sim_config(cfg) -> SimConfig:
    return SimConfig(cfg["phantom"], cfg["train_count"], cfg["test_count"], cfg["seed"],
                     cfg["grid"], cfg["spacing"], cfg["n_ellipses"], cfg["n_views"], cfg["dso"],
                     cfg["dsd"], cfg["pattern"], cfg["I0"])


def fbp_config(cfg) -> FbpConfig:
    return FbpConfig(cfg["filter"], cfg["limited_weighting"])


def unet_spec(cfg) -> UNetSpec:
    return UNetSpec(cfg["depth"], cfg["base_channels"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(cfg["epochs"], cfg["lr"], cfg["minibatch"], cfg["seed"], cfg["flips"],
                       cfg["patch"], cfg["train_margin"], cfg["predict_patch"], cfg["warm_start"])


def _floats(s):
    return [float(v) for v in s.replace(";", ",").split(",") if v.strip()]


def _out(args) -> Path:
    if args.out is None:
        raise InvalidArgument("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _finish(out: Path, cfg: dict, command: str, inputs=()):
    (out / "config.txt").write_text(format_config(cfg))
    outputs = {str(p.relative_to(out)): file_digest(p) for p in sorted(out.rglob("*"))
               if p.is_file() and p.name != "run_manifest.json"}
    manifest = {"command": command, "inputs": {str(p): file_digest(p) for p in inputs},
                "outputs": outputs}
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(args, cfg):
    out = _out(args)
    cases = simulate_cases(sim_config(cfg), fbp_config(cfg))
    write_dataset(cases, out, {k: cfg[k] for k in list(DEFAULTS)[:12]})
    _finish(out, cfg, "simulate")
    print(f"wrote {len(cases)} cases to {out}")


def _dataset(args):
    if args.dataset is None:
        raise InvalidArgument("--dataset is required")
    return Path(args.dataset)


def _chain(cfg):
    if cfg["chain"] == "identity":
        return identity_chain(unet_spec(cfg), cfg["N"], cfg["M"], fbp_config(cfg))
    if not cfg["chain"]:
        raise InvalidArgument("method=unrolled needs chain = <train output dir> or identity")
    return read_run(cfg["chain"])


def cmd_reconstruct(args, cfg):
    ds = _dataset(args)
    inputs = dataset_inputs(ds)
    cases = read_dataset(ds, cfg["split"])
    out = _out(args)
    method = cfg["method"]
    chain = _chain(cfg) if method == "unrolled" else None
    rows = []
    for c in cases:
        img = reconstruct_case(c, method, fbp_config(cfg), chain, cfg["beta"], cfg["tv_iters"],
                               cfg["tv_M"])
        save_image(img, out / "images" / f"{c.id}_{method}")
        export_windowed(img, out / "png" / f"{c.id}_{method}.png", cfg["png_center"],
                        cfg["png_width"])
        r, s = score(img, c.ref)
        rows.append((c.id, method, repr(r), repr(s)))
    write_metrics_csv(out / "metrics.csv", rows)
    verify_dataset(ds)  # inputs unchanged
    _finish(out, cfg, "reconstruct", inputs)
    print(f"{method}: mean RMSE {np.mean([float(r[2]) for r in rows]):.3f} HU over {len(rows)} cases")


def _write_heldout(path, trace, ids):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["case", "unroll", "rmse_hu"])
        for cid, row in zip(ids, trace):
            for n, v in enumerate(row):
                wr.writerow([cid, n, repr(float(v))])


def _train(cfg, ds, spec=None, M=None, N=None):
    train = read_dataset(ds, "train")
    test = read_dataset(ds, "test")
    if not train:
        raise InvalidArgument("dataset has no training cases")
    fcfg = fbp_config(cfg)
    chain = greedy_train(training_cases(train, fcfg), N or cfg["N"], M or cfg["M"],
                         spec or unet_spec(cfg), train_config(cfg), fcfg)
    trace = heldout_trace(chain, test)[0] if test else np.zeros((0, chain.n_unrolls + 1))
    return chain, trace, [c.id for c in test]


def cmd_train(args, cfg):
    ds = _dataset(args)
    inputs = dataset_inputs(ds)
    verify_dataset(ds)
    out = _out(args)
    chain, trace, ids = _train(cfg, ds)
    write_run(chain, out, inputs)
    _write_heldout(out / "heldout.csv", trace, ids)
    verify_dataset(ds)
    _finish(out, cfg, "train", inputs)
    msg = " -> ".join(f"{v:.2f}" for v in trace.mean(axis=0)) if len(ids) else "n/a"
    print(f"trained {chain.n_unrolls} unrolls; held-out RMSE per unroll: {msg}")


def cmd_sweep(args, cfg):
    ds = _dataset(args)
    inputs = dataset_inputs(ds)
    verify_dataset(ds)
    out = _out(args)
    axis = cfg["sweep_axis"]
    if axis not in ("unrolls", "subsets", "depth"):
        raise InvalidArgument("sweep_axis must be unrolls, subsets or depth")
    values = [int(v) for v in _floats(cfg["sweep_values"])]
    if not values:
        raise InvalidArgument("sweep_values is empty")
    rows = []
    if axis == "unrolls":
        # a greedy chain's first n unrolls are exactly the chain trained with N = n
        try:
            chain, trace, _ = _train(cfg, ds, N=max(values))
            for v in values:
                rows.append((axis, v, repr(float(trace[:, v].mean())),
                             repr(chain.losses[v]), "ok"))
        except (NumericalFailure, InvalidArgument) as e:
            rows += [(axis, v, "", "", f"failed: {e}") for v in values]
    else:
        for v in values:
            try:
                spec = UNetSpec(v, cfg["base_channels"]) if axis == "depth" else None
                chain, trace, _ = _train(cfg, ds, spec=spec, M=v if axis == "subsets" else None)
                rows.append((axis, v, repr(float(trace[:, -1].mean())), repr(chain.losses[-1]),
                             "ok"))
            except (NumericalFailure, InvalidArgument) as e:
                rows.append((axis, v, "", "", f"failed: {e}"))
    with open(out / f"sweep_{axis}.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["axis", "value", "heldout_rmse_hu", "train_loss", "status"])
        wr.writerows(rows)
    _finish(out, cfg, "sweep", inputs)
    for r in rows:
        print(",".join(str(x) for x in r))


def cmd_cost(args, cfg):
    out = _out(args)
    if cfg["cost_samples"]:
        samples = read_cost_csv(cfg["cost_samples"], cfg["cost_column"])
        inputs = [Path(cfg["cost_samples"])]
    else:
        grid = itertools.product(*(map(int, _floats(cfg[k]))
                                   for k in ("cost_grid_n", "cost_grid_np", "cost_grid_nz")))
        rows = [r[:4] + (repr(r[4]),)
                for r in measure_cost_grid(list(grid), n=cfg["cost_image"], seed=cfg["seed"])]
        write_cost_csv(out / "cost_samples.csv", rows)
        samples = read_cost_csv(out / "cost_samples.csv", cfg["cost_column"])
        inputs = []
    model = fit_cost_model(samples)
    lines = [model.describe()]
    for target in cfg["cost_predict"].split(";"):
        if target.strip():
            N, Np, Nz = (float(v) for v in target.split(":"))
            lines.append(f"predict N={N:g} Np={Np:g} Nz={Nz:g}: {model.predict(N, Np, Nz):.6g}")
    report = "\n".join(lines) + "\n"
    (out / "cost_report.txt").write_text(report)
    _finish(out, cfg, "cost", inputs)
    print(report, end="")


def _metrics(path):
    p = Path(path)
    if not p.is_file():
        raise StaleDataset(f"metrics file not found: {path}")
    with open(p) as fh:
        return {r["case"]: (float(r["rmse_hu"]), float(r["ssim_liver"])) for r in csv.DictReader(fh)}


def cmd_evaluate(args, cfg):
    """Paired confidence intervals of ``a - b`` for two metrics.csv files."""
    out = _out(args)
    if not cfg["eval_a"] or not cfg["eval_b"]:
        raise InvalidArgument("evaluate needs eval_a and eval_b (metrics.csv paths)")
    a, b = _metrics(cfg["eval_a"]), _metrics(cfg["eval_b"])
    ids = sorted(set(a) & set(b))
    if len(ids) < 2:
        raise InvalidArgument("need at least 2 cases present in both metric files")
    lines = []
    for k, name in enumerate(("rmse_hu", "ssim_liver")):
        ci = ci_difference([a[i][k] for i in ids], [b[i][k] for i in ids], cfg["eval_level"])
        lines.append(f"{name} (a - b): {ci}")
    report = "\n".join(lines) + "\n"
    (out / "ci_report.txt").write_text(report)
    _finish(out, cfg, "evaluate", [Path(cfg["eval_a"]), Path(cfg["eval_b"])])
    print(report, end="")


COMMANDS = {
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "cost": cmd_cost,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="unrollct", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="key = value configuration file")
    ap.add_argument("--dataset", help="dataset directory written by simulate")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--threads", type=int, help="worker threads for compiled kernels")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise InvalidArgument("--threads must be >= 1")
            try:
                import numba
                numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
            except ImportError:
                pass
        cfg = load_config(args.config, args.seed)
        COMMANDS[args.command](args, cfg)
    except InvalidArgument as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (StaleDataset, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
