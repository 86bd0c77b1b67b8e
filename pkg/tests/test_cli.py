"""Tests for the command-line surface: exit codes, run directories and reports."""
import json

import pandas as pd
import pytest

from cli.app import run
from cli.handlers import routing_report
from mlcore.training.manifest import load_manifest, verify_manifest
from cli.plots import CHARTS, seed_band
from core.config import config_to_dict
from core.settings import Settings
from mlcore.training.runner import run_training
from tests.conftest import tiny_train_config


@pytest.fixture
def settings(tmp_path):
    return Settings(seed_override=None, log_level="INFO", runs_dir=str(tmp_path / "runs"))


def write_config(path, **changes):
    path.write_text(json.dumps(config_to_dict(tiny_train_config(**changes))), encoding="utf-8")
    return str(path)


def record(step, index, reward, branch, teacher_index):
    return {
        "step": step,
        "group_id": 0,
        "rollout_index": index,
        "prompt": [1, 2, 10],
        "response": [1, 2, 11] if reward else [9, 11],
        "reward": reward,
        "branch": branch,
        "teacher_index": teacher_index,
    }


def six_of_eight():
    """Two correct rollouts teach the other six."""
    rows = [record(0, 0, 1.0, "GRPO", 1), record(0, 1, 1.0, "GRPO", 0)]
    rows += [record(0, i, 0.0, "SDPO", i % 2) for i in range(2, 8)]
    return rows


class TestTrain:
    """Test `train` and its manifest."""

    def test_missing_config_creates_nothing(self, tmp_path, settings):
        out = tmp_path / "run"
        assert run(["train", "--config", str(tmp_path / "missing.json"), "--out", str(out)], settings) == 1
        assert not out.exists()

    def test_invalid_config(self, tmp_path, settings):
        config = tmp_path / "bad.json"
        config.write_text(json.dumps({"group_size": 1}), encoding="utf-8")
        out = tmp_path / "run"
        assert run(["train", "--config", str(config), "--out", str(out)], settings) == 1
        assert not out.exists()

    def test_requires_a_config_source(self, settings):
        assert run(["train"], settings) == 1

    def test_run_and_rerun_from_manifest(self, tmp_path, settings):
        config = write_config(tmp_path / "cfg.json", steps=2)
        first = tmp_path / "first"
        assert run(["train", "--config", config, "--out", str(first)], settings) == 0
        for name in ("config.json", "metrics.csv", "rollouts.jsonl", "train.log", "manifest.json"):
            assert (first / name).exists(), name

        manifest = load_manifest(str(first / "manifest.json"))
        assert manifest.seed == 0
        assert verify_manifest(manifest, str(first)) == []
        log_entry = next(f for f in manifest.files if f.path == "train.log")
        assert log_entry.reproducible is None

        second = tmp_path / "second"
        argv = ["train", "--from-manifest", str(first / "manifest.json"), "--out", str(second)]
        assert run(argv, settings) == 0
        assert verify_manifest(manifest, str(second)) == []

    def test_manifest_detects_tampering(self, tmp_path, settings):
        out = tmp_path / "run"
        assert run(["train", "--config", write_config(tmp_path / "cfg.json", steps=1), "--out", str(out)], settings) == 0
        with open(out / "rollouts.jsonl", "a", encoding="utf-8") as handle:
            handle.write("\n")
        assert verify_manifest(load_manifest(str(out / "manifest.json")), str(out)) == ["rollouts.jsonl"]

    def test_seed_flag_overrides_config(self, tmp_path, settings):
        out = tmp_path / "run"
        argv = ["train", "--config", write_config(tmp_path / "cfg.json", steps=1), "--seed", "5", "--out", str(out)]
        assert run(argv, settings) == 0
        assert json.loads((out / "config.json").read_text(encoding="utf-8"))["seed"] == 5

    def test_malformed_yaml_config(self, tmp_path, settings):
        config = tmp_path / "bad.yaml"
        config.write_text("algorithm: [SRPO\n", encoding="utf-8")
        out = tmp_path / "run"
        assert run(["train", "--config", str(config), "--out", str(out)], settings) == 1
        assert not out.exists()

    def test_malformed_override_value(self, tmp_path, settings):
        out = tmp_path / "run"
        argv = ["train", "--config", write_config(tmp_path / "cfg.json"), "--set", "steps=[1", "--out", str(out)]
        assert run(argv, settings) == 1
        assert not out.exists()


class TestStats:
    """Test routing statistics recomputed from a rollout log."""

    def test_six_of_eight_routed(self):
        report = routing_report(six_of_eight())
        assert report.loc[0, "sdpo_frac"] == 0.75
        assert report.loc[0, "grpo_frac"] == 0.25
        assert report.loc[0, "teacher_avail_frac"] == 1.0

    def test_command_prints_report(self, tmp_path, settings, capsys):
        log = tmp_path / "rollouts.jsonl"
        log.write_text("".join(json.dumps(r) + "\n" for r in six_of_eight()), encoding="utf-8")
        assert run(["stats", "--rollouts", str(log)], settings) == 0
        assert "0.75" in capsys.readouterr().out

    def test_empty_log(self, tmp_path, settings):
        log = tmp_path / "rollouts.jsonl"
        log.write_text("", encoding="utf-8")
        assert run(["stats", "--rollouts", str(log)], settings) == 1

    def test_malformed_log(self, tmp_path, settings):
        log = tmp_path / "rollouts.jsonl"
        log.write_text("{not json\n", encoding="utf-8")
        assert run(["stats", "--rollouts", str(log)], settings) == 1

    def test_cross_check_with_run_metrics(self, tmp_path, settings):
        paths = run_training(tiny_train_config(steps=2), str(tmp_path / "run")).paths
        argv = ["stats", "--rollouts", str(paths.rollouts), "--metrics", str(paths.metrics)]
        assert run(argv, settings) == 0

        frame = pd.read_csv(paths.metrics)
        frame.loc[0, "sdpo_frac"] = frame.loc[0, "sdpo_frac"] + 0.125
        frame.loc[0, "grpo_frac"] = frame.loc[0, "grpo_frac"] - 0.125
        frame.to_csv(paths.metrics, index=False)
        assert run(argv, settings) == 1


class TestPlot:
    """Test chart rendering."""

    def test_single_seed_charts(self, tmp_path, settings, capsys):
        rows = [
            {"step": s, "train_accuracy": 0.5, "eval_avg_at_k": None, "mean_response_length": 3.0,
             "grpo_frac": 0.4, "sdpo_frac": 0.6, "teacher_avail_frac": 0.9, "mean_teacher_entropy": 1.0}
            for s in range(6)
        ]
        metrics = tmp_path / "metrics.csv"
        pd.DataFrame(rows).to_csv(metrics, index=False)
        out = tmp_path / "charts"
        assert run(["plot", "--metrics", str(metrics), "--out", str(out)], settings) == 0
        for name in CHARTS:
            assert (out / f"{name}.svg").read_text(encoding="utf-8").lstrip().startswith("<?xml")

    def test_missing_columns(self, tmp_path, settings):
        metrics = tmp_path / "metrics.csv"
        pd.DataFrame({"step": [0]}).to_csv(metrics, index=False)
        assert run(["plot", "--metrics", str(metrics), "--out", str(tmp_path / "c")], settings) == 1

    def test_seed_band(self):
        a = pd.DataFrame({"step": [0, 1], "x": [0.0, 1.0]})
        b = pd.DataFrame({"step": [0, 1], "x": [1.0, 1.0]})
        band = seed_band([a, b], "x")
        assert band["mean"].tolist() == [0.5, 0.75]
        assert band["std"].tolist() == [0.5, 0.25]

    def test_seed_band_constant_single_seed(self):
        band = seed_band([pd.DataFrame({"step": [0, 1, 2], "x": [2.0, 2.0, 2.0]})], "x")
        assert band["mean"].tolist() == [2.0, 2.0, 2.0]
        assert band["std"].tolist() == [0.0, 0.0, 0.0]


class TestUtilityCommands:
    """Test golden, dump-tasks and ablate."""

    def test_golden(self, tmp_path, settings):
        out = tmp_path / "golden.json"
        assert run(["golden", "--out", str(out)], settings) == 0
        payload = json.loads(out.read_text(encoding="utf-8"))
        assert all(case["ok"] for case in payload["cases"])

    def test_dump_tasks(self, tmp_path, settings):
        out = tmp_path / "tasks.jsonl"
        argv = ["dump-tasks", "--config", write_config(tmp_path / "cfg.json"), "--count", "5", "--out", str(out)]
        assert run(argv, settings) == 0
        lines = [json.loads(line) for line in out.read_text(encoding="utf-8").splitlines()]
        assert len(lines) == 5
        for task in lines:
            assert task["solution"] == sorted(task["prompt"][:-1]) + [11]

    def test_ablate_no_dw_matches_beta_zero(self, tmp_path, settings):
        config = write_config(tmp_path / "cfg.json", steps=2, dw_beta=0.0)
        out = tmp_path / "ablation"
        argv = ["ablate", "--config", config, "--out", str(out), "--seeds", "1", "--variants", "SRPO,SRPO_NO_DW"]
        assert run(argv, settings) == 0
        summary = pd.read_csv(out / "summary.csv")
        assert list(summary.columns) == ["variant", "step", "eval_mean", "eval_std", "seeds"]
        assert summary["variant"].tolist() == ["SRPO", "SRPO_NO_DW"]
        assert summary["eval_mean"].iloc[0] == summary["eval_mean"].iloc[1]
        srpo = pd.read_csv(out / "SRPO" / "seed0" / "metrics.csv").drop(columns=["wall_seconds"])
        no_dw = pd.read_csv(out / "SRPO_NO_DW" / "seed0" / "metrics.csv").drop(columns=["wall_seconds"])
        pd.testing.assert_frame_equal(srpo, no_dw)

    def test_ablate_records_every_run(self, tmp_path, settings):
        out = tmp_path / "ablation"
        argv = ["ablate", "--config", write_config(tmp_path / "cfg.json", steps=2), "--out", str(out),
                "--seeds", "1", "--variants", "GRPO,SRPO"]
        assert run(argv, settings) == 0
        for variant in ("GRPO", "SRPO"):
            run_dir = out / variant / "seed0"
            assert (run_dir / "train.log").exists()
            assert verify_manifest(load_manifest(str(run_dir / "manifest.json")), str(run_dir)) == []

        sweep = load_manifest(str(out / "manifest.json"))
        listed = {entry.path for entry in sweep.files}
        assert {"summary.csv", "GRPO/seed0/metrics.csv", "SRPO/seed0/manifest.json"} <= listed
        assert set(sweep.config["variants"]) == {"GRPO", "SRPO"}
        assert verify_manifest(sweep, str(out)) == []

    def test_ablate_unknown_variant(self, tmp_path, settings):
        argv = ["ablate", "--config", write_config(tmp_path / "cfg.json"), "--out", str(tmp_path / "a"),
                "--variants", "PPO"]
        assert run(argv, settings) == 1
