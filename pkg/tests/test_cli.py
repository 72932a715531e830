import json

import numpy as np
import pandas as pd
import pytest

from dynamix.cli import main
from dynamix.policy import init_params, load_checkpoint, save_checkpoint
from dynamix.runlog import EPISODE_COLUMNS, REQUIRED_FILES, SCHEMA_VERSION

SMALL = ["--workers", "2", "--episodes", "2", "--steps", "3", "--k", "4", "--timeout", "10"]


def _train(out, *extra):
    return main(["--mode", "train", *SMALL, "--out", str(out), *extra])


def test_train_writes_run_directory(tmp_path):
    assert _train(tmp_path, "--seed", "0") == 0
    run = tmp_path / "train-seed0"
    for name in REQUIRED_FILES + ("events.jsonl", "policy.bin"):
        assert (run / name).exists(), name

    episodes = pd.read_csv(run / "episodes.csv")
    assert list(episodes.columns) == list(EPISODE_COLUMNS)
    assert list(episodes["policy_version"]) == [1, 2]

    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["schema_version"] == SCHEMA_VERSION
    assert manifest["updates"] == 2
    assert load_checkpoint(run / "policy.bin").version == 2

    config = json.loads((run / "config.json").read_text())
    assert (config["seed"], config["steps"], config["episodes"]) == (0, 3, 2)
    assert len((run / "steps.jsonl").read_text().splitlines()) == 2 * 4 * 2


def test_same_seed_gives_byte_identical_artifacts(tmp_path):
    assert _train(tmp_path / "a", "--seed", "4") == 0
    assert _train(tmp_path / "b", "--seed", "4") == 0
    for name in ("config.json", "episodes.csv", "worker_rewards.csv", "steps.jsonl", "policy.bin"):
        assert (tmp_path / "a" / "train-seed4" / name).read_bytes() == \
            (tmp_path / "b" / "train-seed4" / name).read_bytes(), name


def test_each_seed_gets_its_own_run(tmp_path):
    assert _train(tmp_path, "--seed", "0", "--seed", "1") == 0
    assert {p.name for p in tmp_path.iterdir()} == {"train-seed0", "train-seed1"}
    a = (tmp_path / "train-seed0" / "steps.jsonl").read_bytes()
    b = (tmp_path / "train-seed1" / "steps.jsonl").read_bytes()
    assert a != b


def test_warm_start_continues_policy_version(tmp_path):
    assert _train(tmp_path / "first") == 0
    checkpoint = tmp_path / "first" / "train-seed0" / "policy.bin"
    assert _train(tmp_path / "second", "--checkpoint", str(checkpoint)) == 0
    assert load_checkpoint(tmp_path / "second" / "train-seed0" / "policy.bin").version == 4


def test_baseline_sweep(tmp_path):
    code = main(["--mode", "baseline", *SMALL, "--batch-size", "32", "--batch-size", "256", "--out", str(tmp_path)])
    assert code == 0
    assert {p.name for p in tmp_path.iterdir()} == {"baseline-b32-seed0", "baseline-b256-seed0"}
    steps = pd.read_json(tmp_path / "baseline-b32-seed0" / "steps.jsonl", lines=True)
    assert set(steps["batch_size"]) == {32}
    assert not (tmp_path / "baseline-b32-seed0" / "policy.bin").exists()
    episodes = pd.read_csv(tmp_path / "baseline-b256-seed0" / "episodes.csv")
    assert list(episodes["policy_version"]) == [0, 0]


def test_infer_with_trained_checkpoint(tmp_path):
    assert _train(tmp_path / "train") == 0
    checkpoint = tmp_path / "train" / "train-seed0" / "policy.bin"
    code = main(["--mode", "infer", *SMALL, "--checkpoint", str(checkpoint), "--greedy", "--out", str(tmp_path / "infer")])
    assert code == 0
    run = tmp_path / "infer" / "infer-seed0"
    manifest = json.loads((run / "manifest.json").read_text())
    assert (manifest["updates"], manifest["policy_version"]) == (0, 2)
    assert not (run / "policy.bin").exists()


def test_socket_transport(tmp_path):
    assert _train(tmp_path, "--transport", "socket") == 0
    assert (tmp_path / "train-seed0" / "episodes.csv").exists()


def test_report_tables(tmp_path, capsys):
    assert _train(tmp_path, "--seed", "0", "--seed", "1") == 0
    assert main(["--mode", "baseline", *SMALL, "--batch-size", "64", "--out", str(tmp_path)]) == 0
    assert main(["--mode", "report", "--out", str(tmp_path)]) == 0

    report = tmp_path / "report"
    summary = pd.read_csv(report / "summary.csv")
    assert sorted(summary["run"]) == ["baseline-b64-seed0", "train-seed0", "train-seed1"]
    assert summary["versions_monotone"].all()
    trend = pd.read_csv(report / "reward_trend.csv")
    assert len(trend) == 3 * 2
    trajectory = pd.read_csv(report / "batch_trajectory.csv")
    assert len(trajectory) == 3 * 2 * 4
    baseline = trajectory[trajectory["run"] == "baseline-b64-seed0"]
    assert np.allclose(baseline["batch_mean"], 64.0)
    assert "train-seed1" in capsys.readouterr().out


# ── usage errors ──

def test_batch_size_outside_range(tmp_path):
    assert main(["--mode", "baseline", *SMALL, "--batch-size", "16", "--out", str(tmp_path)]) == 2


def test_infer_needs_checkpoint(tmp_path):
    assert main(["--mode", "infer", *SMALL, "--out", str(tmp_path)]) == 2


def test_missing_checkpoint_file(tmp_path):
    assert main(["--mode", "infer", *SMALL, "--checkpoint", str(tmp_path / "none.bin"), "--out", str(tmp_path)]) == 2


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a policy")
    assert main(["--mode", "infer", *SMALL, "--checkpoint", str(bad), "--out", str(tmp_path / "out")]) == 2


def test_checkpoint_with_wrong_input_size(tmp_path):
    path = tmp_path / "small.bin"
    save_checkpoint(init_params(np.random.default_rng(0), input_dim=5, hidden=4), path)
    assert main(["--mode", "infer", *SMALL, "--checkpoint", str(path), "--out", str(tmp_path / "out")]) == 2


def test_report_without_runs(tmp_path):
    assert main(["--mode", "report", "--out", str(tmp_path)]) == 2
    assert main(["--mode", "report", "--out", str(tmp_path / "missing")]) == 2


def test_report_with_incomplete_run(tmp_path):
    assert _train(tmp_path) == 0
    (tmp_path / "train-seed0" / "episodes.csv").unlink()
    assert main(["--mode", "report", "--out", str(tmp_path)]) == 2


def test_unknown_reward_coefficient(tmp_path):
    assert _train(tmp_path, "--coeff", "zeta=1.0") == 2


def test_malformed_coefficient_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        _train(tmp_path, "--coeff", "alpha")
    assert info.value.code == 2


def test_missing_cluster_config(tmp_path):
    assert _train(tmp_path, "--config", str(tmp_path / "cluster.json")) == 2


@pytest.mark.parametrize("flag", ["--episodes", "--steps"])
def test_zero_schedule_length_is_rejected(tmp_path, flag):
    # an explicit 0 must not fall back to the preset value
    assert _train(tmp_path, flag, "0") == 2
    assert not (tmp_path / "train-seed0" / "policy.bin").exists()
