import csv
import json

import numpy as np
import pytest

from unrollct.cli import DEFAULTS, format_config, main, parse_config
from unrollct.core import load_image, load_sinogram
from unrollct.errors import InvalidArgument
from unrollct.evalcost import TERMS, rmse
from unrollct.experiment import read_dataset

TINY = """
# tiny desk config
grid = 32
spacing = 4.0
n_views = 48
n_ellipses = 3
train_count = 2
test_count = 1
N = 2
M = 4
depth = 1
base_channels = 4
patch = 16
train_margin = 4
epochs = 1
minibatch = 4
predict_patch = 32
"""


def _cfg(tmp_path, extra="", name="run.cfg"):
    p = tmp_path / name
    p.write_text(TINY + extra)
    return str(p)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("ds")
    cfg = _cfg(tmp)
    assert main(["simulate", "--config", cfg, "--out", str(tmp / "data")]) == 0
    return tmp, cfg, tmp / "data"


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# -- config -----------------------------------------------------------------

def test_parse_config_types():
    cfg = parse_config("N = 3\nlr = 1e-4\nflips = false\nI0 = inf\npattern = limited:150 # arc\n")
    assert cfg["N"] == 3 and cfg["lr"] == 1e-4 and cfg["flips"] is False
    assert cfg["I0"] == float("inf") and cfg["pattern"] == "limited:150"
    assert parse_config(format_config(cfg)) == cfg


@pytest.mark.parametrize("text", ["bogus = 1\n", "N = three\n", "no equals sign\n", "flips = maybe\n"])
def test_parse_config_rejects(text):
    with pytest.raises(InvalidArgument):
        parse_config(text)


def test_unknown_key_exit_code(tmp_path):
    assert main(["simulate", "--config", _cfg(tmp_path, "colour = red\n"), "--out",
                 str(tmp_path / "o")]) == 2


def test_missing_out_exit_code(tmp_path):
    assert main(["simulate", "--config", _cfg(tmp_path)]) == 2


def test_missing_config_file(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)]) == 2


# -- simulate -----------------------------------------------------------------

def test_simulate_deterministic(dataset, tmp_path):
    _, cfg, data = dataset
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    assert (data / "manifest.json").read_text() == (tmp_path / "again" / "manifest.json").read_text()
    assert (data / "config.txt").is_file() and (data / "run_manifest.json").is_file()


def test_simulate_seed_override(dataset, tmp_path):
    _, cfg, data = dataset
    assert main(["simulate", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "s5")]) == 0
    assert (data / "manifest.json").read_text() != (tmp_path / "s5" / "manifest.json").read_text()


def test_simulate_sparse_view_count(tmp_path):
    cfg = _cfg(tmp_path, "n_views = 144\ntrain_count = 1\ntest_count = 0\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    s = load_sinogram(tmp_path / "d" / "cases" / "train_000_sampled")
    assert s.n_views == 36


def test_full_view_fbp_beats_sparse(dataset):
    from unrollct.analytic import fbp
    _, _, data = dataset
    for c in read_dataset(data):
        sparse = fbp(c.sampled, c.ref.grid)
        assert rmse(c.ref, c.phantom) < rmse(sparse, c.phantom)


# -- reconstruct ----------------------------------------------------------------

def test_fbp_on_full_data_matches_reference(tmp_path):
    cfg = _cfg(tmp_path, "pattern = full\ntrain_count = 1\ntest_count = 1\n")
    assert main(["simulate", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    assert main(["reconstruct", "--config", cfg, "--dataset", str(tmp_path / "d"),
                 "--out", str(tmp_path / "r")]) == 0
    rows = _rows(tmp_path / "r" / "metrics.csv")
    assert len(rows) == 2 and all(float(r["rmse_hu"]) < 1e-3 for r in rows)  # f32 storage
    assert (tmp_path / "r" / "png" / "train_000_fbp.png").is_file()


def test_identity_chain_equals_fbp(dataset, tmp_path):
    tmp, _, data = dataset
    base = _cfg(tmp_path)
    uni = _cfg(tmp_path, "method = unrolled\nchain = identity\n", "u.cfg")
    assert main(["reconstruct", "--config", base, "--dataset", str(data), "--out", str(tmp_path / "f")]) == 0
    assert main(["reconstruct", "--config", uni, "--dataset", str(data), "--out", str(tmp_path / "u")]) == 0
    a = load_image(tmp_path / "f" / "images" / "test_000_fbp").data
    b = load_image(tmp_path / "u" / "images" / "test_000_unrolled").data
    assert np.array_equal(a, b)


def test_unrolled_without_chain_is_config_error(dataset, tmp_path):
    _, _, data = dataset
    cfg = _cfg(tmp_path, "method = unrolled\n")
    assert main(["reconstruct", "--config", cfg, "--dataset", str(data), "--out", str(tmp_path / "o")]) == 2


def test_tampered_dataset_exit_code(dataset, tmp_path):
    import shutil
    _, cfg, data = dataset
    copy = tmp_path / "copy"
    shutil.copytree(data, copy)
    raw = copy / "cases" / "test_000_sampled.raw"
    buf = bytearray(raw.read_bytes())
    buf[10] ^= 0xFF
    raw.write_bytes(bytes(buf))
    assert main(["reconstruct", "--config", cfg, "--dataset", str(copy), "--out", str(tmp_path / "o")]) == 3


# -- train / sweep ------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(dataset):
    tmp, cfg, data = dataset
    assert main(["train", "--config", cfg, "--dataset", str(data), "--out", str(tmp / "run")]) == 0
    return tmp / "run"


def test_train_outputs(trained):
    rows = _rows(trained / "losses.csv")
    full = [float(r["full_image_loss"]) for r in rows if r["full_image_loss"]]
    assert len(full) == 3
    assert all(b <= a for a, b in zip(full, full[1:]))
    held = _rows(trained / "heldout.csv")
    assert {int(r["unroll"]) for r in held} == {0, 1, 2}
    man = json.loads((trained / "run_manifest.json").read_text())
    assert man["command"] == "train" and man["inputs"]


def test_train_rerun_identical(dataset, trained, tmp_path):
    _, cfg, data = dataset
    assert main(["train", "--config", cfg, "--dataset", str(data), "--out", str(tmp_path / "r2")]) == 0
    for f in ("unroll_01.params", "unroll_02.params", "losses.csv"):
        assert (trained / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()


def test_reconstruct_with_trained_chain(dataset, trained, tmp_path):
    _, _, data = dataset
    cfg = _cfg(tmp_path, f"method = unrolled\nchain = {trained}\nsplit = test\n")
    assert main(["reconstruct", "--config", cfg, "--dataset", str(data), "--out", str(tmp_path / "o")]) == 0
    rows = _rows(tmp_path / "o" / "metrics.csv")
    held = [r for r in _rows(trained / "heldout.csv") if r["unroll"] == "2"]
    assert float(rows[0]["rmse_hu"]) == pytest.approx(float(held[0]["rmse_hu"]), abs=0.01)


@pytest.mark.parametrize("axis,values", [("subsets", "1,4"), ("unrolls", "1,2")])
def test_sweep_csv(dataset, tmp_path, axis, values):
    _, _, data = dataset
    cfg = _cfg(tmp_path, f"sweep_axis = {axis}\nsweep_values = {values}\n")
    assert main(["sweep", "--config", cfg, "--dataset", str(data), "--out", str(tmp_path / "s")]) == 0
    rows = _rows(tmp_path / "s" / f"sweep_{axis}.csv")
    assert [r["value"] for r in rows] == values.split(",")
    assert all(r["status"] == "ok" and np.isfinite(float(r["heldout_rmse_hu"])) for r in rows)
    if axis == "unrolls":
        losses = [float(r["train_loss"]) for r in rows]
        assert losses[1] <= losses[0]


def test_sweep_marks_failures(dataset, tmp_path):
    _, _, data = dataset
    cfg = _cfg(tmp_path, "sweep_axis = subsets\nsweep_values = 4,99\n")
    assert main(["sweep", "--config", cfg, "--dataset", str(data), "--out", str(tmp_path / "s")]) == 0
    rows = _rows(tmp_path / "s" / "sweep_subsets.csv")
    assert rows[0]["status"] == "ok" and rows[1]["status"].startswith("failed")


# -- cost / evaluate ------------------------------------------------------------

def test_cost_from_samples(tmp_path, capsys):
    c = [0.1, 0.02, 0.3, 0.001, 0.5, 0.01, 0.2, 0.003]
    p = tmp_path / "samples.csv"
    with open(p, "w") as fh:
        fh.write("N,Np,Nz,bytes,seconds\n")
        for N in (1, 2, 3):
            for Np in (8, 16):
                for Nz in (1, 2):
                    v = sum(ci * N ** i * Np ** j * Nz ** k for ci, (i, j, k) in zip(c, TERMS))
                    fh.write(f"{N},{Np},{Nz},0,{v!r}\n")
    cfg = _cfg(tmp_path, f"cost_samples = {p}\ncost_predict = 2:16:2;10:128:128\n")
    assert main(["cost", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    report = (tmp_path / "c" / "cost_report.txt").read_text()
    assert "r2 = 1.000000" in report and "c_111" in report
    want = sum(ci * 2 ** i * 16 ** j * 2 ** k for ci, (i, j, k) in zip(c, TERMS))
    line = [l for l in report.splitlines() if l.startswith("predict N=2 ")][0]
    assert float(line.rsplit(":", 1)[1]) == pytest.approx(want, rel=1e-5)
    assert "predict N=10 Np=128 Nz=128" in report


def test_cost_rank_deficient(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("N,Np,Nz,bytes,seconds\n" + "".join(f"{n},8,1,0,1.0\n" for n in range(1, 10)))
    cfg = _cfg(tmp_path, f"cost_samples = {p}\n")
    assert main(["cost", "--config", cfg, "--out", str(tmp_path / "c")]) == 2


def test_evaluate(tmp_path):
    for name, off in (("a", 0.0), ("b", 1.0)):
        with open(tmp_path / f"{name}.csv", "w") as fh:
            fh.write("case,method,rmse_hu,ssim_liver\n")
            for i, v in enumerate([10.0, 12.0, 11.0, 15.0]):
                fh.write(f"c{i},{name},{v + off + 0.1 * i * i},{0.9 - off / 100}\n")
    cfg = _cfg(tmp_path, f"eval_a = {tmp_path / 'a.csv'}\neval_b = {tmp_path / 'b.csv'}\n")
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    rep = (tmp_path / "e" / "ci_report.txt").read_text()
    assert "rmse_hu (a - b): mean=-1" in rep and "n=4" in rep


def test_defaults_cover_liver_window():
    assert DEFAULTS["png_center"] - DEFAULTS["png_width"] / 2 == -160
    assert DEFAULTS["png_center"] + DEFAULTS["png_width"] / 2 == 240
