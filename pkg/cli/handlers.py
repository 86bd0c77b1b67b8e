import argparse
import logging
from collections import defaultdict
from pathlib import Path
from typing import Optional

import pandas as pd

from cli.plots import PLOT_COLUMNS, render_charts
from core.batch.ablation import run_ablation
from core.config import (
    ABLATION_VARIANTS,
    Algorithm,
    ConfigValidationError,
    TrainConfig,
    apply_overrides,
    config_from_dict,
    resolve_config,
    resolve_variant_configs,
)
from core.env.tasks import dump_tasks, is_correct
from core.golden import write_golden
from core.routing import EmptyBatchError, routing_stats
from core.settings import Settings
from core.types import Branch, RoutingDecision
from mlcore.policy.checkpoint import CheckpointFormatError
from mlcore.policy.model import NonFiniteLossError
from mlcore.optim import NonFiniteGradientError
from mlcore.training.artifacts import LogSchemaError, MetricsColumnsError, read_metrics, read_rollouts
from mlcore.training.manifest import MANIFEST_FILE, load_manifest
from mlcore.training.runner import run_recorded

logger = logging.getLogger(__name__)

STATS_TOL = 1e-12
_ROUTING_COLUMNS = ("grpo_frac", "sdpo_frac", "teacher_avail_frac")


def _seed(args: argparse.Namespace, settings: Settings) -> Optional[int]:
    return args.seed if getattr(args, "seed", None) is not None else settings.seed_override


def _train_config(args: argparse.Namespace, settings: Settings) -> TrainConfig:
    if getattr(args, "from_manifest", None):
        manifest = load_manifest(args.from_manifest)
        return config_from_dict(apply_overrides(manifest.config, args.set))
    if not args.config and not args.preset:
        raise ValueError("train needs --config, --preset or --from-manifest")
    return resolve_config(
        args.config,
        overrides=args.set,
        preset=args.preset,
        algorithm=args.algorithm,
        seed=_seed(args, settings),
    )


def _report_config_error(exc: ConfigValidationError) -> int:
    logger.error("Invalid config: %s (field=%s, code=%s)", exc.issue.message, exc.issue.field, exc.issue.code)
    return 1


def cmd_train(args: argparse.Namespace, settings: Settings) -> int:
    try:
        cfg = _train_config(args, settings)
    except ConfigValidationError as exc:
        return _report_config_error(exc)
    except (FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return 1

    out_dir = Path(args.out or Path(settings.runs_dir) / f"{cfg.algorithm.value}-seed{cfg.seed}")
    try:
        result, manifest = run_recorded(cfg, str(out_dir), resume=args.resume)
    except (
        NonFiniteLossError,
        NonFiniteGradientError,
        CheckpointFormatError,
        MetricsColumnsError,
        ValueError,
        OSError,
    ) as exc:
        logger.error("Training failed in %s: %s", out_dir, exc)
        return 1
    logger.info("run complete: %d steps, %d artifacts listed in %s", result.state.step, len(manifest.files), MANIFEST_FILE)
    return 0


def _parse_variants(raw: Optional[str]) -> list[Algorithm]:
    if not raw:
        return list(ABLATION_VARIANTS)
    return [Algorithm(item.strip()) for item in raw.split(",") if item.strip()]


def cmd_ablate(args: argparse.Namespace, settings: Settings) -> int:
    try:
        variants = _parse_variants(args.variants)
        configs = resolve_variant_configs(
            args.config, variants, overrides=args.set, preset=args.preset, seed=_seed(args, settings)
        )
    except ConfigValidationError as exc:
        return _report_config_error(exc)
    except (FileNotFoundError, ValueError) as exc:
        logger.error("%s", exc)
        return 1
    try:
        summary = run_ablation(
            configs, args.out, seeds=args.seeds, workers=args.workers, log_level=settings.log_level
        )
    except (NonFiniteLossError, NonFiniteGradientError, ValueError, OSError) as exc:
        logger.error("Ablation failed: %s", exc)
        return 1
    print(summary.to_string(index=False))
    return 0


def routing_report(records: list[dict]) -> pd.DataFrame:
    """Routing fractions per step recomputed from rollout records."""
    by_step: dict[int, list[RoutingDecision]] = defaultdict(list)
    for record in records:
        by_step[record["step"]].append(
            RoutingDecision(
                correct=is_correct(float(record["reward"])),
                teacher_available=record.get("teacher_index") is not None,
                branch=Branch(record["branch"]),
                teacher_index=record.get("teacher_index"),
                rollout_index=record["rollout_index"],
            )
        )
    rows = []
    for step in sorted(by_step):
        stats = routing_stats(by_step[step])
        rows.append(
            {
                "step": step,
                "rollouts": stats.count,
                "grpo_frac": stats.grpo_fraction,
                "sdpo_frac": stats.sdpo_fraction,
                "teacher_avail_frac": stats.teacher_avail_fraction,
            }
        )
    return pd.DataFrame(rows, columns=["step", "rollouts", *_ROUTING_COLUMNS])


def cmd_stats(args: argparse.Namespace, settings: Settings) -> int:
    try:
        report = routing_report(read_rollouts(Path(args.rollouts)))
    except LogSchemaError as exc:
        logger.error("%s: %s", args.rollouts, exc)
        return 1
    except (FileNotFoundError, EmptyBatchError, ValueError) as exc:
        logger.error("%s", exc)
        return 1
    print(report.to_string(index=False))

    if not args.metrics:
        return 0
    try:
        metrics = read_metrics(Path(args.metrics), required=("step", *_ROUTING_COLUMNS))
    except (FileNotFoundError, MetricsColumnsError) as exc:
        logger.error("%s", exc)
        return 1
    merged = report.merge(metrics, on="step", how="outer", suffixes=("", "_metrics"), indicator=True)
    unmatched = merged[merged["_merge"] != "both"]["step"].tolist()
    if unmatched:
        logger.error("steps present in only one of the files: %s", unmatched)
        return 1
    mismatches = []
    for column in _ROUTING_COLUMNS:
        gap = (merged[column] - merged[f"{column}_metrics"]).abs()
        for step in merged.loc[gap > STATS_TOL, "step"]:
            mismatches.append(f"step {step} {column}")
    if mismatches:
        logger.error("routing fractions disagree with %s: %s", args.metrics, ", ".join(mismatches))
        return 1
    logger.info("routing fractions match %s on %d steps", args.metrics, len(merged))
    return 0


def cmd_plot(args: argparse.Namespace, settings: Settings) -> int:
    try:
        frames = [read_metrics(Path(path), required=PLOT_COLUMNS) for path in args.metrics]
    except (FileNotFoundError, MetricsColumnsError) as exc:
        logger.error("%s", exc)
        return 1
    for path in render_charts(frames, args.out):
        print(path)
    return 0


def cmd_golden(args: argparse.Namespace, settings: Settings) -> int:
    cases = write_golden(args.out)
    failing = [case for case in cases if not case["ok"]]
    for case in failing:
        logger.error(
            "golden %s %s: expected %s, got %s", case["op"], case["inputs"], case["expected"], case["actual"]
        )
    return 1 if failing else 0


def cmd_dump_tasks(args: argparse.Namespace, settings: Settings) -> int:
    try:
        cfg = resolve_config(args.config, overrides=args.set, seed=_seed(args, settings))
    except ConfigValidationError as exc:
        return _report_config_error(exc)
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return 1
    if args.count < 0:
        logger.error("--count must be ≥ 0")
        return 1
    count = dump_tasks(cfg.env, args.count, args.out, seed=cfg.seed)
    print(f"dump_done: tasks={count}, file={args.out}")
    return 0
