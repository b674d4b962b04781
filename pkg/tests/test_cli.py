import json
import subprocess
import sys

import pytest

from cdsp_moe.cli import main
from cdsp_moe.metrics import read_csv_log, read_csv_matrix

FAST = ["--set", "data.subsample=30", "--set", "model.d_model=16", "--set", "model.d_base=64",
        "--set", "model.rank=16", "--set", "model.n_experts=4", "--set", "train.batch_size=32"]


def _json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run") / "cdsp"
    assert main(["train", "--quiet", "--out", str(out), "--set", "train.epochs=2", *FAST]) == 0
    return out


def test_train_writes_run_directory(run_dir):
    rows = read_csv_log(run_dir / "metrics.csv")
    assert [r["epoch"] for r in rows] == [1.0, 2.0]
    echo = json.loads((run_dir / "config.json").read_text())
    assert echo["train"]["epochs"] == 2 and echo["model"]["top_k"] == 2 and echo["train"]["seed"] == 0
    assert (run_dir / "checkpoint.json").exists() and (run_dir / "summary.json").exists()


def test_single_epoch_override(tmp_path, capsys):
    assert main(["train", "--quiet", "--variant", "standard", "--out", str(tmp_path), "--set", "train.epochs=1",
                 *FAST]) == 0
    assert _json(capsys)["variant"] == "standard"
    assert len(read_csv_log(tmp_path / "metrics.csv")) == 1


def test_missing_dataset_path(tmp_path, capsys):
    code = main(["train", "--out", str(tmp_path), "--set", "data.source=idx",
                 "--set", "data.paths.0.images=a", "--set", "data.paths.0.labels=b"])
    assert code == 2
    assert "data.paths.1.images" in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "train.epoch=1"]) == 2
    assert "valid:" in capsys.readouterr().err


def test_unreadable_dataset_is_io_error(tmp_path):
    paths = [f"--set=data.paths.{t}.{k}={tmp_path}/none-{t}-{k}" for t in range(3) for k in ("images", "labels")]
    assert main(["train", "--out", str(tmp_path / "o"), "--set", "data.source=idx", *paths]) == 3


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["simulate", "--preset", "quiet", "--out", str(blocker / "sub"), "--set", "dynamics.steps=5"]) == 3


def test_eval_is_repeatable(run_dir, tmp_path, capsys):
    args = ["eval", "--checkpoint", str(run_dir / "checkpoint.json"), "--out", str(tmp_path), *FAST[:2]]
    assert main(args + ["--blind"]) == 0
    first = _json(capsys)
    csv1 = (tmp_path / "routing_blind.csv").read_bytes()
    assert main(args + ["--blind"]) == 0
    assert _json(capsys) == first and (tmp_path / "routing_blind.csv").read_bytes() == csv1
    header, hist, labels = read_csv_matrix(tmp_path / "routing_blind.csv")
    assert hist.shape == (3, 4) and labels == ["t0", "t1", "t2"]
    assert (tmp_path / "routing_blind.svg").exists()


def test_eval_mismatched_checkpoint(run_dir, capsys):
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.json"), "--out", str(run_dir / "x"),
                 "--set", "data.subsample=30",
                 "--set", "data.source=\"procedural\"", "--set", "model.input_dim=100"])
    assert code == 2


def test_export_topology_and_idempotence(run_dir, capsys):
    assert main(["export", str(run_dir), "--what", "topology"]) == 0
    files = _json(capsys)["files"]
    assert len(files) == 2
    before = [open(f, "rb").read() for f in files]
    assert main(["export", str(run_dir), "--what", "topology"]) == 0
    assert [open(f, "rb").read() for f in files] == before
    assert main(["export", str(run_dir), "--what", "routing"]) == 0
    assert len(_json(capsys)["files"]) == 4
    assert main(["export", str(run_dir), "--what", "curves"]) == 0
    assert len(read_csv_log(run_dir / "figures/curves.csv")) == 2


def test_export_errors(tmp_path, capsys):
    assert main(["export", str(tmp_path), "--what", "topology"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["export", str(tmp_path), "--what", "weights"])
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "topology" in err and "routing" in err and "curves" in err


def test_simulate_presets(tmp_path, capsys):
    assert main(["simulate", "--preset", "no-force", "--out", str(tmp_path / "nf"),
                 "--set", "dynamics.steps=200", "--set", "dynamics.n_chains=500", "--max-chains", "5"]) == 0
    out = _json(capsys)
    assert abs(out["final_entropy"] - out["initial_entropy"]) < 0.05 * out["initial_entropy"]
    summary = json.loads((tmp_path / "nf/summary.json").read_text())
    assert {"supermartingale", "entropy_curve", "absorption_fraction", "residual_entropy"} <= set(summary)
    assert len(read_csv_log(tmp_path / "nf/trajectories.csv")) == 5 * 21
    assert main(["simulate", "--preset", "bogus", "--out", str(tmp_path / "b")]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cdsp_moe", "simulate", "--preset", "quiet", "--out", str(tmp_path),
                           "--set", "dynamics.steps=10", "--set", "dynamics.n_chains=10"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["preset"] == "quiet"


def test_simulate_conflict_rate_preset(tmp_path, capsys):
    assert main(["simulate", "--preset", "conflict-rate", "--out", str(tmp_path)]) == 0
    out = _json(capsys)
    assert out["d_out"] == 128 and out["n_pairs"] == 100000
    assert 0.495 <= out["fraction_negative"] <= 0.505
    assert json.loads((tmp_path / "summary.json").read_text())["conflict_rate"]["std"] == out["std"]
