"""Supervised warm start of the base policy; stops once probe accuracy reaches the target."""
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from core.config import TrainConfig
from core.env.tasks import gen_task, verify
from core.types import SEP, TEACH
from mlcore.optim import AdamMoments, optimizer_update
from mlcore.policy.model import PolicyParams, loss_gradient, score_batch
from mlcore.policy.sampling import sample_rollouts
from mlcore.training.seeding import step_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class WarmstartReport:
    steps: int
    final_loss: float
    probe_accuracy: float
    reached_target: bool


def sft_examples(
    cfg: TrainConfig, rng: np.random.Generator
) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]]]:
    prefixes: list[tuple[int, ...]] = []
    targets: list[tuple[int, ...]] = []
    for _ in range(cfg.warmstart.batch_size):
        prompt, solution = gen_task(cfg.env, rng)
        if rng.random() < cfg.warmstart.teacher_format_fraction:
            prefixes.append(prompt + (TEACH,) + solution + (SEP,))
        else:
            prefixes.append(prompt)
        targets.append(solution)
    return prefixes, targets


def sft_loss(
    params: PolicyParams,
    prefixes: Sequence[Sequence[int]],
    targets: Sequence[Sequence[int]],
) -> torch.Tensor:
    logprobs, mask = score_batch(params, prefixes, targets)
    width = logprobs.shape[1]
    target = torch.zeros(len(targets), width, dtype=torch.long)
    for row, tokens in enumerate(targets):
        target[row, : len(tokens)] = torch.as_tensor(list(tokens), dtype=torch.long)
    nll = -logprobs.gather(-1, target[..., None]).squeeze(-1)
    return nll[mask].mean()


def probe_accuracy(params: PolicyParams, cfg: TrainConfig, probe: int) -> float:
    w = cfg.warmstart
    task_rng = step_rng(cfg.seed, "probe", probe)
    hits: list[float] = []
    for index in range(w.probe_prompts):
        prompt, _ = gen_task(cfg.env, task_rng)
        rollouts = sample_rollouts(
            params,
            prompt,
            w.probe_rollouts,
            cfg.max_response_len,
            cfg.rollout_temperature,
            cfg.rollout_top_p,
            step_rng(cfg.seed, "probe", probe, index + 1),
        )
        hits.extend(verify(cfg.env, prompt, r.response) for r in rollouts)
    return float(np.mean(hits))


def warm_start(params: PolicyParams, cfg: TrainConfig) -> tuple[PolicyParams, WarmstartReport]:
    w = cfg.warmstart
    if w.max_steps == 0:
        return params, WarmstartReport(0, math.nan, math.nan, False)

    moments = AdamMoments.zeros_like(params)
    loss = math.nan
    accuracy = math.nan
    for step in range(w.max_steps):
        prefixes, targets = sft_examples(cfg, step_rng(cfg.seed, "warmstart", step))
        loss, grad = loss_gradient(
            params, lambda live: sft_loss(live, prefixes, targets), batch_id=f"warmstart{step}"
        )
        params, moments, _ = optimizer_update(
            params, grad, moments, w.learning_rate, 0.0, cfg.grad_clip_norm, f"warmstart{step}"
        )
        if (step + 1) % w.check_interval == 0:
            accuracy = probe_accuracy(params, cfg, step)
            logger.info("warm start step=%d loss=%.4f probe_accuracy=%.3f", step + 1, loss, accuracy)
            if accuracy >= w.target_accuracy:
                return params, WarmstartReport(step + 1, loss, accuracy, True)

    accuracy = probe_accuracy(params, cfg, w.max_steps)
    reached = accuracy >= w.target_accuracy
    if not reached:
        logger.warning(
            "warm start stopped at max_steps=%d with probe_accuracy=%.3f below target %.3f",
            w.max_steps,
            accuracy,
            w.target_accuracy,
        )
    return params, WarmstartReport(w.max_steps, loss, accuracy, reached)
