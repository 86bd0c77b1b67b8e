import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from core.config import TrainConfig, config_to_dict
from core.settings import LOG_FORMAT
from mlcore.policy.checkpoint import CheckpointState, load_checkpoint, save_checkpoint
from mlcore.policy.model import init_params
from mlcore.training.artifacts import (
    RunPaths,
    append_rollouts,
    metrics_from_frame,
    read_metrics,
    truncate_rollouts,
    write_metrics,
)
from mlcore.training.manifest import RunManifest, build_manifest, write_manifest
from mlcore.training.seeding import deterministic_torch, step_rng
from mlcore.training.trainer import StepMetrics, TrainerState, collect_batch, evaluate, train_step
from mlcore.training.warmstart import WarmstartReport, warm_start

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RunResult:
    paths: RunPaths
    state: TrainerState
    warmstart: Optional[WarmstartReport]


def eval_due(step: int, cfg: TrainConfig) -> bool:
    return (step + 1) % cfg.eval_interval == 0 or step == cfg.steps - 1


def _write_config(paths: RunPaths, cfg: TrainConfig) -> None:
    paths.config.write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _checkpoint(path: Path, state: TrainerState, seed: int) -> None:
    save_checkpoint(
        str(path),
        CheckpointState(
            student=state.student,
            teacher=state.teacher,
            moments=state.moments,
            step=state.step,
            seed=seed,
        ),
    )


def _fresh_state(cfg: TrainConfig, paths: RunPaths) -> tuple[TrainerState, WarmstartReport]:
    params = init_params(cfg.model, cfg.seed)
    params, report = warm_start(params, cfg)
    logger.info(
        "base policy ready after %d warm-start steps (probe accuracy %.3f)",
        report.steps,
        report.probe_accuracy,
    )
    state = TrainerState.initial(params)
    _checkpoint(paths.base_checkpoint, state, cfg.seed)
    write_metrics(paths.metrics, [])
    paths.rollouts.write_text("", encoding="utf-8")
    return state, report


def _resumed_state(cfg: TrainConfig, paths: RunPaths) -> TrainerState:
    if not paths.config.exists():
        raise FileNotFoundError(f"Cannot resume: {paths.config} is missing")
    stored = json.loads(paths.config.read_text(encoding="utf-8"))
    current = config_to_dict(cfg)
    differing = sorted(k for k in current if k != "steps" and current[k] != stored.get(k))
    if differing:
        raise ValueError(f"Cannot resume: config differs from {paths.config} in {differing}")

    ckpt = load_checkpoint(str(paths.latest_checkpoint))
    rows: list[StepMetrics] = []
    for row in metrics_from_frame(read_metrics(paths.metrics)):
        if row.step >= ckpt.step:
            continue
        # the previous run may have evaluated its final step off-schedule
        if not eval_due(row.step, cfg) and not math.isnan(row.eval_avg_at_k):
            row = dataclasses.replace(row, eval_avg_at_k=math.nan)
        rows.append(row)
    kept = truncate_rollouts(paths.rollouts, ckpt.step)
    write_metrics(paths.metrics, rows)
    logger.info(
        "resuming from %s at step %d (%d metric rows, %d rollout records kept)",
        paths.latest_checkpoint,
        ckpt.step,
        len(rows),
        kept,
    )
    return TrainerState(
        student=ckpt.student,
        teacher=ckpt.teacher,
        moments=ckpt.moments,
        step=ckpt.step,
        history=tuple(rows),
    )


def run_training(cfg: TrainConfig, out_dir: str, resume: bool = False) -> RunResult:
    paths = RunPaths(Path(out_dir))
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    report: Optional[WarmstartReport] = None
    with deterministic_torch():
        if resume and paths.latest_checkpoint.exists():
            state = _resumed_state(cfg, paths)
        else:
            if resume:
                logger.warning("no checkpoint under %s; starting fresh", paths.checkpoints)
            state, report = _fresh_state(cfg, paths)
        _write_config(paths, cfg)

        while state.step < cfg.steps:
            step = state.step
            groups = collect_batch(state.student, cfg, step)
            state, metrics, records = train_step(state, groups, cfg)
            if eval_due(step, cfg):
                score = evaluate(
                    state.student,
                    cfg.env,
                    cfg.eval_prompts,
                    cfg.eval_rollouts,
                    cfg.eval_temperature,
                    cfg.eval_top_p,
                    step_rng(cfg.seed, "eval", step),
                    max_len=cfg.max_response_len,
                )
                metrics = dataclasses.replace(metrics, eval_avg_at_k=score)
                state = state.with_last_metrics(metrics)
            write_metrics(paths.metrics, state.history)
            append_rollouts(paths.rollouts, records)
            if state.step % cfg.checkpoint_interval == 0 or state.step == cfg.steps:
                _checkpoint(paths.latest_checkpoint, state, cfg.seed)
            logger.info(
                "step=%d loss=%.4f acc=%.3f sdpo_frac=%.3f eval=%s",
                step,
                metrics.mean_loss,
                metrics.train_accuracy,
                metrics.sdpo_frac,
                "-" if math.isnan(metrics.eval_avg_at_k) else f"{metrics.eval_avg_at_k:.3f}",
            )
        if cfg.steps == 0:
            _checkpoint(paths.latest_checkpoint, state, cfg.seed)
    return RunResult(paths=paths, state=state, warmstart=report)


def run_recorded(cfg: TrainConfig, out_dir: str, resume: bool = False) -> tuple[RunResult, RunManifest]:
    target = Path(out_dir)
    target.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(target / "train.log", encoding="utf-8")
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger()
    root.addHandler(file_handler)
    try:
        result = run_training(cfg, str(target), resume=resume)
    finally:
        root.removeHandler(file_handler)
        file_handler.close()
    manifest = build_manifest(cfg, str(target))
    write_manifest(manifest, result.paths.manifest)
    return result, manifest
