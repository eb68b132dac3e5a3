import json

import numpy as np
import pytest

from sftdg.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, parse_seeds, UsageError
from sftdg.domains import DGProblem, DomainDataset

CONFIG = {
    "data": {"seed": 0, "samples_per_class_per_domain": 20},
    "train": {"algorithm": "sft", "steps": 20, "eval_every": 10, "lambda2": 1.0},
    "landscape": {"resolution": 5},
}


@pytest.fixture
def workdir(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "toy.json")]) == EXIT_OK
    return tmp_path


def test_gen_data(workdir):
    prob = DGProblem.load(workdir / "toy.json")
    assert len(prob.domains) == 4 and len(prob.training_domains[0]) == 60


def test_gen_data_requires_seed(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x.json")]) == EXIT_USAGE


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"seed": 1}, "optimiser": {}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "x.json")]) == EXIT_USAGE


def test_bad_arguments():
    assert main(["train"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_parse_seeds():
    assert parse_seeds("1..3") == [1, 2, 3]
    assert parse_seeds("4,2") == [4, 2]
    assert parse_seeds(None) is None
    with pytest.raises(UsageError):
        parse_seeds("a..b")


def train_args(d, out, seeds="1..2"):
    return ["train", "--config", str(d / "config.json"), "--dataset", str(d / "toy.json"),
            "--out", str(out), "--seeds", seeds]


def test_train_and_landscape(workdir):
    out = workdir / "runs"
    assert main(train_args(workdir, out)) == EXIT_OK
    for s in (1, 2):
        for name in (f"run_sft_seed{s}.csv", f"run_sft_seed{s}.json", f"manifest_sft_seed{s}.json"):
            assert (out / name).exists()
    meta = json.loads((out / "run_sft_seed1.json").read_text())
    assert meta["train_config"]["seed"] == 1 and meta["phi"]

    land = workdir / "land"
    args = ["landscape", "--manifest", str(out / "manifest_sft_seed1.json"),
            "--dataset", str(workdir / "toy.json"), "--out", str(land),
            "--config", str(workdir / "config.json")]
    assert main(args) == EXIT_OK
    files = sorted(p.name for p in land.iterdir())
    assert len(files) == 9 and "landscape.json" in files
    report = json.loads((land / "landscape.json").read_text())
    assert set(report["consistency"]) == {"onehot", "soft"}


def test_landscape_needs_refiner(workdir):
    cfg = dict(CONFIG, train=dict(CONFIG["train"], algorithm="erm"))
    (workdir / "config.json").write_text(json.dumps(cfg))
    out = workdir / "runs"
    assert main(train_args(workdir, out, "1")) == EXIT_OK
    args = ["landscape", "--manifest", str(out / "manifest_erm_seed1.json"),
            "--dataset", str(workdir / "toy.json"), "--out", str(workdir / "land")]
    assert main(args) == EXIT_USAGE


def test_train_is_deterministic(workdir):
    a, b = workdir / "a", workdir / "b"
    assert main(train_args(workdir, a, "3")) == EXIT_OK
    assert main(train_args(workdir, b, "3")) == EXIT_OK
    assert (a / "run_sft_seed3.csv").read_bytes() == (b / "run_sft_seed3.csv").read_bytes()


def test_sweep(workdir):
    spec = workdir / "sweep.json"
    spec.write_text(json.dumps({"lambda2": [0.0, 1.0], "rho": {"start": 0.01, "stop": 0.05, "num": 2}}))
    out = workdir / "sweep"
    args = ["sweep", "--config", str(workdir / "config.json"), "--dataset", str(workdir / "toy.json"),
            "--out", str(out), "--sweep", str(spec), "--seeds", "1,2"]
    assert main(args) == EXIT_OK
    lines = (out / "sweep_summary.csv").read_text().splitlines()
    assert len(lines) == 1 + 4
    assert len((out / "sweep_runs.csv").read_text().splitlines()) == 1 + 8
    assert (out / "sweep_manifest.json").exists()


def test_bench_projection(tmp_path, capsys):
    out = tmp_path / "bench.json"
    assert main(["bench-projection", "--n", "5", "--trials", "3", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["benchmarks"][0]["N"] == 5
    assert main(["bench-projection", "--n", "500", "--trials", "1"]) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path):
    labels = np.arange(20) % 3
    prob = DGProblem((DomainDataset(0, np.full((20, 2), 1e308), labels),
                      DomainDataset(1, -np.full((20, 2), 1e308), labels)),
                     (DomainDataset(2, np.zeros((20, 2)), labels, "test"),), 3)
    prob.save(tmp_path / "big.json")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"algorithm": "sam", "steps": 3, "init_std": 10.0}}))
    args = ["train", "--config", str(cfg), "--dataset", str(tmp_path / "big.json"),
            "--out", str(tmp_path / "o"), "--seeds", "0"]
    assert main(args) == EXIT_NUMERIC
