"""Sample-level routing: correct rollouts to GRPO, failed rollouts with a teacher to SDPO."""
from enum import Enum
from typing import Optional, Sequence

from core.config import Algorithm
from core.env.tasks import TeacherContext, is_correct
from core.types import Branch, RolloutGroup, RoutingDecision, RoutingStats


class EmptyBatchError(ValueError):
    pass


class AlignmentError(ValueError):
    pass


class ObjectiveKind(str, Enum):
    """Loss actually applied to a rollout's tokens."""

    GRPO = "grpo"
    SDPO = "sdpo"
    MIX = "mix"
    NONE = "none"


def route_rollout(correct: bool, teacher_available: bool) -> Branch:
    if not correct and teacher_available:
        return Branch.SDPO
    return Branch.GRPO


def route_group(
    group: RolloutGroup,
    contexts: Sequence[Optional[TeacherContext]],
) -> list[RoutingDecision]:
    if len(contexts) != group.size:
        raise AlignmentError(
            f"got {len(contexts)} teacher contexts for a group of {group.size} rollouts"
        )
    decisions: list[RoutingDecision] = []
    for i, (reward, context) in enumerate(zip(group.rewards, contexts)):
        correct = is_correct(reward)
        available = context is not None
        decisions.append(
            RoutingDecision(
                correct=correct,
                teacher_available=available,
                branch=route_rollout(correct, available),
                teacher_index=context.source_rollout if context is not None else None,
                rollout_index=i,
            )
        )
    return decisions


def routing_stats(decisions: Sequence[RoutingDecision]) -> RoutingStats:
    if not decisions:
        raise EmptyBatchError("routing_stats needs at least one decision")
    n = len(decisions)
    sdpo = sum(d.z_sdpo for d in decisions)
    avail = sum(1 for d in decisions if d.teacher_available)
    return RoutingStats(
        grpo_fraction=(n - sdpo) / n,
        sdpo_fraction=sdpo / n,
        teacher_avail_fraction=avail / n,
        count=n,
    )


def assign_objective(algorithm: Algorithm, decision: RoutingDecision) -> ObjectiveKind:
    algorithm = Algorithm(algorithm)
    if algorithm is Algorithm.GRPO:
        return ObjectiveKind.GRPO
    if algorithm in (Algorithm.SRPO, Algorithm.SRPO_NO_DW):
        return ObjectiveKind.SDPO if decision.branch is Branch.SDPO else ObjectiveKind.GRPO
    if algorithm is Algorithm.ADV_MIX:
        return ObjectiveKind.MIX if decision.teacher_available else ObjectiveKind.GRPO
    if not decision.teacher_available:
        return ObjectiveKind.NONE
    if algorithm is Algorithm.SDPO:
        return ObjectiveKind.SDPO
    if algorithm is Algorithm.SDPO_FAILED_ONLY:
        return ObjectiveKind.NONE if decision.correct else ObjectiveKind.SDPO
    if algorithm is Algorithm.SDPO_CORRECT_ONLY:
        return ObjectiveKind.SDPO if decision.correct else ObjectiveKind.NONE
    raise ValueError(f"unsupported algorithm {algorithm}")
