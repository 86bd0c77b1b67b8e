"""Tests for ablation planning and the sweep artifacts."""
import pytest

from core.batch.ablation import SUMMARY_COLUMNS, plan_jobs, run_ablation
from core.config import Algorithm, resolve_variant_configs
from mlcore.training.manifest import load_manifest, verify_manifest
from tests.conftest import tiny_train_config


class TestPlanJobs:
    """Test the variant × seed job grid."""

    def test_large_preset_jobs_keep_variant_hyperparameters(self, tmp_path):
        variants = [Algorithm.GRPO, Algorithm.SDPO, Algorithm.SRPO]
        jobs = plan_jobs(resolve_variant_configs(None, variants, preset="large"), str(tmp_path), seeds=2)
        planned = {
            (job.variant, job.config.seed): (job.config.learning_rate, job.config.mini_batch_size) for job in jobs
        }
        assert planned == {
            (Algorithm.GRPO, 0): (1e-6, 8),
            (Algorithm.GRPO, 1): (1e-6, 8),
            (Algorithm.SDPO, 0): (1e-5, 32),
            (Algorithm.SDPO, 1): (1e-5, 32),
            (Algorithm.SRPO, 0): (5e-6, 32),
            (Algorithm.SRPO, 1): (5e-6, 32),
        }

    def test_run_directories(self, tmp_path):
        configs = {Algorithm.ADV_MIX: tiny_train_config(algorithm=Algorithm.ADV_MIX, seed=3)}
        jobs = plan_jobs(configs, str(tmp_path), seeds=2)
        assert [job.out_dir for job in jobs] == [
            str(tmp_path / "ADV_MIX" / "seed3"),
            str(tmp_path / "ADV_MIX" / "seed4"),
        ]

    def test_mismatched_variant_key(self, tmp_path):
        with pytest.raises(ValueError):
            plan_jobs({Algorithm.GRPO: tiny_train_config(algorithm=Algorithm.SDPO)}, str(tmp_path), seeds=1)

    def test_needs_a_seed(self, tmp_path):
        with pytest.raises(ValueError):
            plan_jobs({Algorithm.SRPO: tiny_train_config()}, str(tmp_path), seeds=0)


class TestRunAblation:
    """Test a serial sweep end to end."""

    def test_sweep_manifest_covers_summary(self, tmp_path):
        configs = {
            Algorithm.GRPO: tiny_train_config(algorithm=Algorithm.GRPO, steps=2),
            Algorithm.SRPO: tiny_train_config(algorithm=Algorithm.SRPO, steps=2),
        }
        summary = run_ablation(configs, str(tmp_path), seeds=1)
        assert list(summary.columns) == SUMMARY_COLUMNS

        manifest = load_manifest(str(tmp_path / "manifest.json"))
        entries = {entry.path: entry for entry in manifest.files}
        assert entries["summary.csv"].reproducible is not None
        assert entries["GRPO/seed0/train.log"].reproducible is None
        assert "SRPO/seed0/manifest.json" in entries
        assert verify_manifest(manifest, str(tmp_path)) == []

        (tmp_path / "summary.csv").write_text("variant\n", encoding="utf-8")
        assert verify_manifest(manifest, str(tmp_path)) == ["summary.csv"]
