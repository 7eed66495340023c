import json

import pytest

from cablelift.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, main

TINY = [
    "--override", "marl.envs=8",
    "--override", "marl.rollouts=8",
    "--override", "nn.actor_hidden=[16,16]",
    "--override", "nn.critic_hidden=[16,16]",
]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "train"
    assert main(["train", "--out", str(out), "--seed", "4", "--iterations", "2", *TINY]) == EXIT_OK
    return out


def test_missing_config(tmp_path, capsys):
    code = main(["train", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path):
    assert main(["train", "--override", "marl.bogus=1", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_manifest_records_override_and_seed(run_dir):
    m = json.loads((run_dir / "manifest.json").read_text())
    assert m["config"]["marl"]["envs"] == 8
    assert m["seed"] == 4
    assert len(m["config_hash"]) == 64 and m["version"]
    assert (run_dir / "config.yaml").exists()
    assert (run_dir / "metrics.csv").exists() and (run_dir / "final.ckpt").exists()


def test_config_file_roundtrip(run_dir, tmp_path):
    out = tmp_path / "again"
    code = main(["train", "--config", str(run_dir / "config.yaml"), "--out", str(out), "--iterations", "1"])
    assert code == EXIT_OK
    a = json.loads((run_dir / "manifest.json").read_text())
    b = json.loads((out / "manifest.json").read_text())
    assert a["config_hash"] == b["config_hash"]


def test_inspect(run_dir, capsys):
    assert main(["inspect", str(run_dir / "final.ckpt")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "dim 135" in out and "[135, 16, 16, 6]" in out


def test_inspect_corrupt(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage" * 10)
    assert main(["inspect", str(bad)]) == EXIT_IO
    err = capsys.readouterr().err
    assert "bad magic" in err and "Traceback" not in err


def test_eval_writes_outputs(run_dir, tmp_path):
    out = tmp_path / "ev"
    code = main(["eval", str(run_dir / "final.ckpt"), "--out", str(out), "--set", "duration=0.5"])
    assert code == EXIT_OK
    assert (out / "metrics.csv").exists() and (out / "timeseries.csv").exists()
    assert (out / "timeseries.png").exists()
    m = json.loads((out / "manifest.json").read_text())
    assert m["scenario"]["displacement"] == [2.0, 0.0, 0.0]


def test_eval_n_mismatch(run_dir, tmp_path):
    code = main(["eval", str(run_dir / "final.ckpt"), "--out", str(tmp_path), "--set", "n_mavs=4", "--no-plot"])
    assert code == EXIT_CONFIG


def test_export_empty(tmp_path, capsys):
    assert main(["export", str(tmp_path)]) == EXIT_IO
    assert "nothing to export" in capsys.readouterr().err


def test_export_idempotent(run_dir, tmp_path):
    # an eval result and an ablation table next to the training run
    assert main(["eval", str(run_dir / "final.ckpt"), "--out", str(run_dir / "eval"), "--set", "duration=0.2", "--no-plot"]) == 0
    (run_dir / "comparison.csv").write_text("ablation,variant,final_mean_reward\ncritic,local,1.0\n")
    assert main(["export", str(run_dir)]) == EXIT_OK
    first = {p.name: p.read_bytes() for p in (run_dir / "export").iterdir() if p.suffix == ".csv"}
    assert main(["export", str(run_dir)]) == EXIT_OK
    second = {p.name: p.read_bytes() for p in (run_dir / "export").iterdir() if p.suffix == ".csv"}
    assert first == second
    assert set(first) == {"training_summary.csv", "eval_summary.csv", "ablations.csv"}
