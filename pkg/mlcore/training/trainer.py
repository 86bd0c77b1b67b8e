import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from typing import Any, Optional, Sequence, Union

import numpy as np
import torch

from core.config import Algorithm, TrainConfig
from core.env.tasks import (
    EnvSpec,
    TeacherContext,
    build_group_contexts,
    eval_prompts,
    gen_task,
    verify,
)
from core.routing import ObjectiveKind, assign_objective, route_group, routing_stats
from core.types import Rollout, RolloutGroup, RoutingDecision
from mlcore import objective as obj
from mlcore.optim import AdamMoments, lr_schedule, optimizer_update
from mlcore.policy.model import (
    DTYPE,
    ParamShapeError,
    PolicyParams,
    ema_update,
    loss_gradient,
    score_batch,
)
from mlcore.policy.sampling import Policy, SampledPolicy, sample_rollouts
from mlcore.training.seeding import step_rng

logger = logging.getLogger(__name__)

_BOUNDED_FIELDS = ("grpo_frac", "sdpo_frac", "teacher_avail_frac", "train_accuracy")


@dataclass(frozen=True)
class StepMetrics:
    step: int
    wall_seconds: float
    mean_loss: float
    grpo_frac: float
    sdpo_frac: float
    teacher_avail_frac: float
    mean_teacher_entropy: float
    mean_response_length: float
    train_accuracy: float
    eval_avg_at_k: float
    grad_norm: float
    dropped_token_count: int

    def __post_init__(self) -> None:
        if self.step < 0:
            raise ValueError("step must be ≥ 0")
        if not self.wall_seconds > 0:
            raise ValueError("wall_seconds must be > 0")
        for name in _BOUNDED_FIELDS:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if self.dropped_token_count < 0:
            raise ValueError("dropped_token_count must be ≥ 0")

    def to_row(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


METRICS_COLUMNS: tuple[str, ...] = tuple(f.name for f in dataclasses.fields(StepMetrics))


@dataclass(frozen=True, eq=False)
class TrainerState:
    """Student, EMA teacher, AdamW moments and the completed-step counter.

    Random streams are keyed by (seed, step), so the step counter is the whole
    rng state.
    """

    student: PolicyParams
    teacher: PolicyParams
    moments: AdamMoments
    step: int = 0
    history: tuple[StepMetrics, ...] = ()

    def __post_init__(self) -> None:
        shape = self.student.flat.shape
        if self.teacher.flat.shape != shape:
            raise ParamShapeError("teacher and student shapes differ")
        if self.moments.exp_avg.shape != shape or self.moments.exp_avg_sq.shape != shape:
            raise ParamShapeError("moment accumulators do not match parameter shape")
        if self.step < 0:
            raise ValueError("step must be ≥ 0")

    @classmethod
    def initial(cls, params: PolicyParams) -> "TrainerState":
        return cls(
            student=params,
            teacher=params.clone(),
            moments=AdamMoments.zeros_like(params),
        )

    def with_last_metrics(self, metrics: StepMetrics) -> "TrainerState":
        return dataclasses.replace(self, history=self.history[:-1] + (metrics,))


@dataclass(frozen=True, eq=False)
class RolloutPlan:
    group_pos: int
    group_id: int
    rollout_index: int
    rollout: Rollout
    advantage: float
    decision: RoutingDecision
    objective: ObjectiveKind
    context: Optional[TeacherContext]

    @property
    def uses_teacher(self) -> bool:
        return self.objective in (ObjectiveKind.SDPO, ObjectiveKind.MIX)

    def to_record(self, step: int) -> dict[str, Any]:
        return {
            "step": step,
            "group_id": self.group_id,
            "rollout_index": self.rollout_index,
            "prompt": list(self.rollout.prompt),
            "response": list(self.rollout.response),
            "reward": self.rollout.reward,
            "branch": self.decision.branch.value,
            "teacher_index": self.decision.teacher_index,
            "objective": self.objective.value,
        }


@dataclass(frozen=True, eq=False)
class _MiniBatch:
    prompts: list[tuple[int, ...]]
    responses: list[tuple[int, ...]]
    tokens: torch.Tensor
    behavior: torch.Tensor
    advantages: torch.Tensor
    is_w: torch.Tensor
    teacher_lp: torch.Tensor
    grpo_sel: torch.Tensor
    sdpo_sel: torch.Tensor
    mix_sel: torch.Tensor
    sdpo_weights: torch.Tensor
    entropies: torch.Tensor
    dropped: int

    @property
    def token_count(self) -> int:
        return int(self.grpo_sel.sum() + self.sdpo_sel.sum() + self.mix_sel.sum())


def collect_batch(params: PolicyParams, cfg: TrainConfig, step: int) -> list[RolloutGroup]:
    task_rng = step_rng(cfg.seed, "task", step)
    groups: list[RolloutGroup] = []
    for pos in range(cfg.question_batch_size):
        prompt, _ = gen_task(cfg.env, task_rng)
        rollouts = sample_rollouts(
            params,
            prompt,
            cfg.group_size,
            cfg.max_response_len,
            cfg.rollout_temperature,
            cfg.rollout_top_p,
            step_rng(cfg.seed, "rollout", step, pos),
        )
        scored = tuple(r.with_reward(verify(cfg.env, prompt, r.response)) for r in rollouts)
        groups.append(RolloutGroup(prompt=prompt, rollouts=scored, group_id=pos))
    return groups


def plan_batch(groups: Sequence[RolloutGroup], cfg: TrainConfig, step: int) -> list[RolloutPlan]:
    plans: list[RolloutPlan] = []
    for pos, group in enumerate(groups):
        verified = RolloutGroup(
            prompt=group.prompt,
            rollouts=tuple(
                r.with_reward(verify(cfg.env, group.prompt, r.response)) for r in group.rollouts
            ),
            group_id=group.group_id,
        )
        contexts = build_group_contexts(verified, step_rng(cfg.seed, "teacher", step, pos))
        decisions = route_group(verified, contexts)
        advantages = obj.group_relative_advantages(verified.rewards, cfg.adv_eps).tolist()
        for i, (rollout, context, decision) in enumerate(
            zip(verified.rollouts, contexts, decisions)
        ):
            plans.append(
                RolloutPlan(
                    group_pos=pos,
                    group_id=verified.group_id,
                    rollout_index=i,
                    rollout=rollout,
                    advantage=advantages[i],
                    decision=decision,
                    objective=assign_objective(cfg.algorithm, decision),
                    context=context,
                )
            )
    return plans


def score_teacher(teacher: PolicyParams, plans: Sequence[RolloutPlan]) -> dict[int, torch.Tensor]:
    wanted = [i for i, plan in enumerate(plans) if plan.uses_teacher]
    if not wanted:
        return {}
    with torch.no_grad():
        logprobs, _ = score_batch(
            teacher,
            [plans[i].context.tokens for i in wanted],
            [plans[i].rollout.response for i in wanted],
        )
    return {
        i: logprobs[row, : len(plans[i].rollout.response)] for row, i in enumerate(wanted)
    }


def _prepare_mini_batch(
    student: PolicyParams,
    indexed_plans: Sequence[tuple[int, RolloutPlan]],
    teacher_by_plan: dict[int, torch.Tensor],
    cfg: TrainConfig,
    first_update: bool,
) -> _MiniBatch:
    plans = [plan for _, plan in indexed_plans]
    prompts = [plan.rollout.prompt for plan in plans]
    responses = [plan.rollout.response for plan in plans]
    rows = len(plans)
    width = max(len(r) for r in responses)

    tokens = torch.zeros(rows, width, dtype=torch.long)
    behavior = torch.zeros(rows, width, dtype=DTYPE)
    for row, plan in enumerate(plans):
        n = len(plan.rollout.response)
        tokens[row, :n] = torch.as_tensor(plan.rollout.response, dtype=torch.long)
        behavior[row, :n] = torch.as_tensor(plan.rollout.behavior_logprobs, dtype=DTYPE)

    with torch.no_grad():
        student_lp, mask = score_batch(student, prompts, responses)
    vocab = student_lp.shape[-1]
    teacher_lp = torch.full((rows, width, vocab), -math.log(vocab), dtype=DTYPE)
    for row, (index, plan) in enumerate(indexed_plans):
        if index in teacher_by_plan:
            teacher_lp[row, : len(plan.rollout.response)] = teacher_by_plan[index]

    kinds = [plan.objective for plan in plans]

    def rows_of(kind: ObjectiveKind) -> torch.Tensor:
        return torch.as_tensor([k is kind for k in kinds], dtype=torch.bool)[:, None]

    uses_teacher = torch.as_tensor([plan.uses_teacher for plan in plans], dtype=torch.bool)[:, None]
    finite = torch.ones(rows, width, dtype=torch.bool)
    with torch.no_grad():
        if bool(uses_teacher.any()):
            support = obj.topk_support(teacher_lp, student_lp, cfg.top_k)
            finite = torch.isfinite(obj.divergence(support, cfg.divergence))
    dropped = int((uses_teacher & mask & ~finite).sum())
    if dropped:
        logger.warning("dropped %d tokens with infinite %s divergence", dropped, cfg.divergence.value)

    grpo_sel = rows_of(ObjectiveKind.GRPO) & mask
    sdpo_sel = rows_of(ObjectiveKind.SDPO) & mask & finite
    mix_sel = rows_of(ObjectiveKind.MIX) & mask & finite

    with torch.no_grad():
        teacher_sel = sdpo_sel | mix_sel
        entropies = obj.teacher_entropy(
            obj.topk_support(teacher_lp[teacher_sel], student_lp[teacher_sel], cfg.top_k)
        )
        sdpo_entropies = obj.teacher_entropy(
            obj.topk_support(teacher_lp[sdpo_sel], student_lp[sdpo_sel], cfg.top_k)
        )
        if cfg.algorithm is Algorithm.SRPO:
            sdpo_weights = obj.dynamic_weights(sdpo_entropies, cfg.dw_beta)
        else:
            sdpo_weights = torch.ones_like(sdpo_entropies)

        current = student_lp.gather(-1, tokens[..., None]).squeeze(-1)
        if first_update:
            is_w = torch.ones(rows, width, dtype=DTYPE)
        else:
            is_w = obj.is_weight(current, behavior, cfg.is_clip_rho)
    advantages = torch.as_tensor([plan.advantage for plan in plans], dtype=DTYPE)[:, None]

    return _MiniBatch(
        prompts=prompts,
        responses=responses,
        tokens=tokens,
        behavior=behavior,
        advantages=advantages.expand(rows, width),
        is_w=is_w,
        teacher_lp=teacher_lp,
        grpo_sel=grpo_sel,
        sdpo_sel=sdpo_sel,
        mix_sel=mix_sel,
        sdpo_weights=sdpo_weights,
        entropies=entropies,
        dropped=dropped,
    )


def _mini_batch_loss(live: PolicyParams, batch: _MiniBatch, cfg: TrainConfig) -> torch.Tensor:
    logprobs, _ = score_batch(live, batch.prompts, batch.responses)
    current = logprobs.gather(-1, batch.tokens[..., None]).squeeze(-1)

    def grpo_losses(sel: torch.Tensor) -> torch.Tensor:
        return batch.is_w[sel] * obj.grpo_token_loss(
            current[sel], batch.behavior[sel], batch.advantages[sel], cfg.eps_low, cfg.eps_high
        )

    grpo_parts: list[torch.Tensor] = []
    if bool(batch.grpo_sel.any()):
        grpo_parts.append(grpo_losses(batch.grpo_sel))
    if bool(batch.mix_sel.any()):
        sel = batch.mix_sel
        support = obj.topk_support(batch.teacher_lp[sel], logprobs[sel], cfg.top_k)
        sdpo_part = obj.sdpo_token_loss(support, cfg.divergence, 1.0, batch.is_w[sel])
        grpo_parts.append(obj.advantage_mix(grpo_losses(sel), sdpo_part, cfg.mix_lambda))
    grpo = torch.cat(grpo_parts) if grpo_parts else logprobs.new_empty(0)

    sdpo = logprobs.new_empty(0)
    if bool(batch.sdpo_sel.any()):
        sel = batch.sdpo_sel
        support = obj.topk_support(batch.teacher_lp[sel], logprobs[sel], cfg.top_k)
        sdpo = obj.sdpo_token_loss(support, cfg.divergence, batch.sdpo_weights, batch.is_w[sel])
    return obj.routed_loss_mean(grpo, sdpo)


def train_step(
    state: TrainerState,
    groups: Sequence[RolloutGroup],
    cfg: TrainConfig,
) -> tuple[TrainerState, StepMetrics, list[dict[str, Any]]]:
    started = time.perf_counter()
    if len(groups) != cfg.question_batch_size:
        raise ValueError(
            f"expected {cfg.question_batch_size} groups, got {len(groups)}"
        )
    plans = plan_batch(groups, cfg, state.step)
    teacher_by_plan = score_teacher(state.teacher, plans)
    logger.debug(
        "step=%d teacher-scored rollouts=%d/%d", state.step, len(teacher_by_plan), len(plans)
    )

    lr_t = lr_schedule(state.step, cfg.learning_rate, cfg.warmup_steps)
    student, moments = state.student, state.moments
    losses: list[float] = []
    norms: list[float] = []
    entropies: list[torch.Tensor] = []
    dropped = 0
    for m in range(cfg.num_mini_batches):
        indexed = [
            (i, plan) for i, plan in enumerate(plans) if plan.group_pos // cfg.mini_batch_size == m
        ]
        batch = _prepare_mini_batch(student, indexed, teacher_by_plan, cfg, first_update=m == 0)
        dropped += batch.dropped
        entropies.append(batch.entropies)
        batch_id = f"step{state.step}/mb{m}"
        if batch.token_count == 0:
            logger.warning("skipping update %s: no valid tokens", batch_id)
            continue
        loss, grad = loss_gradient(
            student, lambda live: _mini_batch_loss(live, batch, cfg), batch_id=batch_id
        )
        student, moments, norm = optimizer_update(
            student, grad, moments, lr_t, cfg.weight_decay, cfg.grad_clip_norm, batch_id=batch_id
        )
        losses.append(loss)
        norms.append(norm)

    teacher = ema_update(state.teacher, student, cfg.ema_rate)

    stats = routing_stats([plan.decision for plan in plans])
    all_entropies = torch.cat(entropies)
    rewards = [plan.rollout.reward for plan in plans]
    metrics = StepMetrics(
        step=state.step,
        wall_seconds=max(time.perf_counter() - started, 1e-9),
        mean_loss=float(np.mean(losses)) if losses else math.nan,
        grpo_frac=stats.grpo_fraction,
        sdpo_frac=stats.sdpo_fraction,
        teacher_avail_frac=stats.teacher_avail_fraction,
        mean_teacher_entropy=float(all_entropies.mean()) if all_entropies.numel() else math.nan,
        mean_response_length=float(np.mean([len(p.rollout.response) for p in plans])),
        train_accuracy=float(np.mean(rewards)),
        eval_avg_at_k=math.nan,
        grad_norm=max(norms) if norms else math.nan,
        dropped_token_count=dropped,
    )
    records = [plan.to_record(state.step) for plan in plans]
    new_state = TrainerState(
        student=student,
        teacher=teacher,
        moments=moments,
        step=state.step + 1,
        history=state.history + (metrics,),
    )
    return new_state, metrics, records


def evaluate(
    policy: Union[Policy, PolicyParams],
    env: EnvSpec,
    n_prompts: int,
    k: int,
    temperature: float,
    top_p: float,
    rng: np.random.Generator,
    max_len: Optional[int] = None,
) -> float:
    """avg@k over held-out prompts: mean over prompts of the mean reward of k samples."""
    if k < 1 or n_prompts < 1:
        raise ValueError("k and n_prompts must be ≥ 1")
    if isinstance(policy, PolicyParams):
        policy = SampledPolicy(policy)
    budget = max_len if max_len is not None else env.max_solution_len
    per_prompt: list[float] = []
    for prompt in eval_prompts(env, n_prompts):
        rollouts = policy.sample(prompt, k, budget, temperature, top_p, rng)
        per_prompt.append(float(np.mean([verify(env, prompt, r.response) for r in rollouts])))
    return float(np.mean(per_prompt))
