import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from cfgp.cli import main
from cfgp.data import write_trajectories
from cfgp.synthetic import make_dataset

CONFIG = "kernel = gibbs\nH = 4\nepochs = 2\nlr = 0.01\nsegments_per_step = 8\nseed = 3\n"
SPLIT = ["--n-test", "2", "--train-frac", "0.75"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_trajectories(make_dataset(10, seed=2, durations=(35.0, 60.0), gap_jitter=5.0),
                       root / "pairs.csv")
    (root / "model.cfg").write_text(CONFIG)
    code = main(["train", "--config", str(root / "model.cfg"), "--data", str(root / "pairs.csv"),
                 "--out", str(root / "train"), *SPLIT])
    assert code == 0
    return root


def test_train_outputs(workspace):
    out = workspace / "train"
    for name in ("model.ckpt", "losses.csv", "split.json", "manifest.json"):
        assert (out / name).is_file(), name
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "train" and man["seeds"]["train"] == 3
    assert man["config"]["train"]["kernel"] == "gibbs"
    assert len(man["inputs"]["data_sha256"]) == 64
    split = json.loads((out / "split.json").read_text())
    assert len(split["test"]) == 2
    assert not set(split["train"]) & set(split["test"])


def test_train_is_reproducible(workspace, tmp_path):
    args = ["train", "--config", str(workspace / "model.cfg"), "--data",
            str(workspace / "pairs.csv"), *SPLIT]
    assert main(args + ["--out", str(tmp_path / "again")]) == 0
    for name in ("losses.csv", "model.ckpt"):
        assert (tmp_path / "again" / name).read_bytes() == (workspace / "train" / name).read_bytes()


def test_simulate_outputs(workspace, tmp_path):
    split = json.loads((workspace / "train" / "split.json").read_text())
    pair = split["test"][0]
    code = main(["simulate", "--ckpt", str(workspace / "train" / "model.ckpt"),
                 "--data", str(workspace / "pairs.csv"), "--pair", pair, "--t-start", "12",
                 "--rounds", "5", "--horizon", "10", "--out", str(tmp_path)])
    assert code == 0
    rows = read_rows(tmp_path / "ensemble.csv")
    assert len(rows) == 5 * 50
    assert {r["round"] for r in rows} == {str(i) for i in range(5)}
    with open(tmp_path / "gram.csv") as fh:
        K = np.array([[float(x) for x in row] for row in csv.reader(fh)])
    assert K.shape == (50, 50)
    assert np.max(np.abs(K - K.T)) <= 1e-10
    traces = read_rows(tmp_path / "traces.csv")
    assert all(float(r["ell"]) > 0 and float(r["sigma"]) > 0 for r in traces)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seeds"]["rounds"] == [0, 4] and man["config"]["kernel"] == "gibbs"


def test_platoon_outputs(workspace, tmp_path):
    code = main(["platoon", "--ckpt", str(workspace / "train" / "model.ckpt"), "--n", "3",
                 "--horizon", "20", "--amplitude", "-3", "--out", str(tmp_path)])
    assert code == 0
    rows = read_rows(tmp_path / "platoon.csv")
    assert {r["vehicle"] for r in rows} == {"0", "1", "2"}
    assert len(rows) == 3 * 100
    ts = read_rows(tmp_path / "timespace.csv")
    assert len(ts) == 101 and list(ts[0]) == ["t", "p0", "p1", "p2"]
    man = json.loads((tmp_path / "manifest.json").read_text())
    prof = man["config"]["platoon"]
    assert (prof["amplitude"], prof["ramp"], prof["hold"], prof["base_speed"]) == (-3.0, 10.0, 20.0, 20.0)


def test_two_vehicle_platoon(workspace, tmp_path):
    assert main(["platoon", "--ckpt", str(workspace / "train" / "model.ckpt"), "--n", "2",
                 "--horizon", "5", "--out", str(tmp_path)]) == 0


def test_evaluate_outputs(workspace, tmp_path):
    ckpt = str(workspace / "train" / "model.ckpt")
    code = main(["evaluate", "--ckpt", ckpt, "--ckpt", ckpt, "--label", "a", "--label", "b",
                 "--data", str(workspace / "pairs.csv"), "--rounds", "4", *SPLIT,
                 "--out", str(tmp_path)])
    assert code == 0
    rows = read_rows(tmp_path / "scores.csv")
    assert {r["model"] for r in rows} == {"a", "b"}
    # same checkpoint under common random numbers scores identically
    by = {(r["model"], r["state"], r["metric"]): r["mean"] for r in rows}
    assert all(by[("a", s, m)] == by[("b", s, m)] for _, s, m in by)
    assert (tmp_path / "raw_scores.csv").is_file()


def test_export_interpretability(workspace, tmp_path):
    code = main(["export-interpretability", "--ckpt", str(workspace / "train" / "model.ckpt"),
                 "--data", str(workspace / "pairs.csv"), "--T", "25", *SPLIT,
                 "--out", str(tmp_path)])
    assert code == 0
    rows = read_rows(tmp_path / "interpretability.csv")
    assert list(rows[0]) == ["ell", "s", "dv", "v", "a"]
    assert len(rows) % 25 == 0 and rows
    assert all(float(r["ell"]) > 0 for r in rows)


def test_output_dir_from_environment(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("CFGP_OUTPUT_DIR", str(tmp_path))
    assert main(["platoon", "--ckpt", str(workspace / "train" / "model.ckpt"), "--n", "2",
                 "--horizon", "2"]) == 0
    assert (tmp_path / "platoon" / "manifest.json").is_file()


@pytest.mark.parametrize("extra,code", [
    (["--rounds", "0"], 2),
    (["--pair", "nope"], 2),
])
def test_simulate_argument_errors(workspace, tmp_path, extra, code, capsys):
    args = {"--rounds": "3", "--pair": "P0000"}
    args.update(dict(zip(extra[::2], extra[1::2])))
    argv = ["simulate", "--ckpt", str(workspace / "train" / "model.ckpt"), "--data",
            str(workspace / "pairs.csv"), "--t-start", "12", "--out", str(tmp_path)]
    for k, v in args.items():
        argv += [k, v]
    assert main(argv) == code
    assert "error:" in capsys.readouterr().err
    assert not (tmp_path / "manifest.json").exists()


def test_missing_kernel_in_config(workspace, tmp_path):
    (tmp_path / "bad.cfg").write_text("H = 4\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--data",
                 str(workspace / "pairs.csv"), "--out", str(tmp_path)]) == 2


def test_empty_test_split(workspace, tmp_path):
    ckpt = str(workspace / "train" / "model.ckpt")
    assert main(["evaluate", "--ckpt", ckpt, "--data", str(workspace / "pairs.csv"),
                 "--n-test", "0", "--out", str(tmp_path)]) == 2


def test_missing_checkpoint(workspace, tmp_path):
    assert main(["platoon", "--ckpt", str(tmp_path / "none.ckpt"), "--out", str(tmp_path)]) == 2


def test_malformed_data_is_exit_3(workspace, tmp_path):
    (tmp_path / "bad.csv").write_text("pair_id,t\nA,0.0\n")
    assert main(["train", "--config", str(workspace / "model.cfg"), "--data",
                 str(tmp_path / "bad.csv"), "--out", str(tmp_path)]) == 3


def test_module_entry_point_version():
    out = subprocess.run([sys.executable, "-m", "cfgp", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("cfgp ")
