"""Variant × seed sweep with a summary table of avg@k at each evaluated step."""
import dataclasses
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Mapping, Sequence

import pandas as pd

from core.config import Algorithm, TrainConfig, config_to_dict, validate_config
from core.settings import LOG_FORMAT
from mlcore.training.artifacts import read_metrics
from mlcore.training.manifest import MANIFEST_FILE, collect_manifest, write_manifest
from mlcore.training.runner import run_recorded

logger = logging.getLogger(__name__)

SUMMARY_FILE = "summary.csv"
SUMMARY_COLUMNS = ["variant", "step", "eval_mean", "eval_std", "seeds"]


@dataclasses.dataclass(frozen=True)
class AblationJob:
    config: TrainConfig
    out_dir: str
    log_level: str = "INFO"

    @property
    def variant(self) -> Algorithm:
        return self.config.algorithm


def plan_jobs(
    configs: Mapping[Algorithm, TrainConfig],
    out_dir: str,
    seeds: int,
    log_level: str = "INFO",
) -> list[AblationJob]:
    if seeds < 1:
        raise ValueError("seeds must be ≥ 1")
    if not configs:
        raise ValueError("at least one variant is required")
    jobs: list[AblationJob] = []
    for variant, cfg in configs.items():
        if cfg.algorithm != variant:
            raise ValueError(f"config for {variant.value} trains {cfg.algorithm.value}")
        for offset in range(seeds):
            seed = cfg.seed + offset
            run_cfg = validate_config(dataclasses.replace(cfg, seed=seed))
            jobs.append(AblationJob(run_cfg, str(Path(out_dir) / variant.value / f"seed{seed}"), log_level))
    return jobs


def _run_job(job: AblationJob) -> str:
    # spawned workers start with an unconfigured root logger
    logging.basicConfig(level=job.log_level, format=LOG_FORMAT)
    result, _ = run_recorded(job.config, job.out_dir)
    return str(result.paths.metrics)


def summarize(jobs: Sequence[AblationJob]) -> pd.DataFrame:
    frames = []
    for job in jobs:
        frame = read_metrics(Path(job.out_dir) / "metrics.csv")[["step", "eval_avg_at_k"]]
        frames.append(frame.assign(variant=job.variant.value, seed=job.config.seed))
    merged = pd.concat(frames, ignore_index=True).dropna(subset=["eval_avg_at_k"])
    if merged.empty:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)
    order = {variant.value: i for i, variant in enumerate(Algorithm)}
    summary = (
        merged.groupby(["variant", "step"])["eval_avg_at_k"]
        .agg(eval_mean="mean", eval_std=lambda s: s.std(ddof=0), seeds="count")
        .reset_index()
    )
    summary["_order"] = summary["variant"].map(order)
    summary = summary.sort_values(["_order", "step"]).drop(columns="_order")
    return summary[SUMMARY_COLUMNS].reset_index(drop=True)


def run_ablation(
    configs: Mapping[Algorithm, TrainConfig],
    out_dir: str,
    seeds: int = 3,
    workers: int = 1,
    log_level: str = "INFO",
) -> pd.DataFrame:
    jobs = plan_jobs(configs, out_dir, seeds, log_level)
    logger.info("ablation: %d runs (%d variants × %d seeds)", len(jobs), len(configs), seeds)
    if workers > 1:
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=context) as pool:
            for path in pool.map(_run_job, jobs):
                logger.info("finished %s", path)
    else:
        for job in jobs:
            logger.info("finished %s", _run_job(job))

    summary = summarize(jobs)
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    summary.to_csv(root / SUMMARY_FILE, index=False)

    sweep = {
        "variants": {variant.value: config_to_dict(cfg) for variant, cfg in configs.items()},
        "seeds": seeds,
    }
    base_seed = min(cfg.seed for cfg in configs.values())
    write_manifest(collect_manifest(sweep, base_seed, str(root)), root / MANIFEST_FILE)
    logger.info("ablation summary written to %s", root / SUMMARY_FILE)
    return summary
