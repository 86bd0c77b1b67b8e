import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import torch

from core.config import Divergence
from core.types import Branch, TokenObjective
from mlcore.policy.model import DTYPE, Distribution

logger = logging.getLogger(__name__)

TensorLike = Union[torch.Tensor, float, Sequence[float]]

NORMALIZATION_TOL = 1e-9


class EmptyObjectiveError(ValueError):
    pass


def _t(value: TensorLike) -> torch.Tensor:
    if torch.is_tensor(value):
        return value if value.is_floating_point() else value.to(DTYPE)
    return torch.as_tensor(value, dtype=DTYPE)


def group_relative_advantages(rewards: TensorLike, adv_eps: float) -> torch.Tensor:
    r = _t(rewards)
    if r.numel() < 2:
        raise ValueError("advantages need at least two rewards")
    centered = r - r.mean()
    return centered / (r.std(correction=0) + adv_eps)


def is_weight(logprob_current: TensorLike, logprob_behavior: TensorLike, rho: float) -> torch.Tensor:
    return torch.clamp(torch.exp(_t(logprob_current) - _t(logprob_behavior)), max=rho)


def grpo_token_loss(
    logprob_new: TensorLike,
    logprob_old: TensorLike,
    advantage: TensorLike,
    eps_low: float,
    eps_high: float,
) -> torch.Tensor:
    ratio = torch.exp(_t(logprob_new) - _t(logprob_old))
    adv = _t(advantage)
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1.0 - eps_low, 1.0 + eps_high) * adv
    return -torch.minimum(unclipped, clipped)


@dataclass(frozen=True, eq=False)
class SupportSet:
    indices: torch.Tensor
    teacher_probs: torch.Tensor
    student_probs: torch.Tensor

    def __post_init__(self) -> None:
        if not (self.indices.shape == self.teacher_probs.shape == self.student_probs.shape):
            raise ValueError("support indices and probabilities must share a shape")

    @property
    def size(self) -> int:
        return self.indices.shape[-1]

    @classmethod
    def from_probs(
        cls,
        teacher_probs: TensorLike,
        student_probs: TensorLike,
        indices: Optional[Sequence[int]] = None,
    ) -> "SupportSet":
        q = _t(teacher_probs)
        p = _t(student_probs)
        for name, probs in (("teacher", q), ("student", p)):
            total = probs.sum(dim=-1)
            if not torch.all((total - 1.0).abs() <= NORMALIZATION_TOL):
                raise ValueError(f"{name} probabilities must sum to 1")
        if indices is None:
            idx = torch.arange(q.shape[-1]).expand(q.shape)
        else:
            idx = torch.as_tensor(list(indices), dtype=torch.long)
            if len(set(idx.tolist())) != idx.numel():
                raise ValueError("support indices must be distinct")
        return cls(indices=idx, teacher_probs=q, student_probs=p)


def _logprobs(dist: Union[Distribution, torch.Tensor]) -> torch.Tensor:
    return dist.logprobs if isinstance(dist, Distribution) else _t(dist)


def topk_support(
    teacher: Union[Distribution, torch.Tensor],
    student: Union[Distribution, torch.Tensor],
    k: int,
) -> SupportSet:
    """Keep the `k` most probable teacher tokens; ties go to the lower vocabulary id."""
    if k < 1:
        raise ValueError("K must be ≥ 1")
    t_lp = _logprobs(teacher)
    s_lp = _logprobs(student)
    k = min(k, t_lp.shape[-1])
    order = torch.sort(t_lp.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    return SupportSet(
        indices=order,
        teacher_probs=torch.softmax(t_lp.gather(-1, order), dim=-1),
        student_probs=torch.softmax(s_lp.gather(-1, order), dim=-1),
    )


def _kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # 0·log 0 = 0; mass where q = 0 gives +inf, flagged by the caller
    return (torch.xlogy(p, p) - torch.xlogy(p, q)).sum(dim=-1)


def forward_kl(support: SupportSet) -> torch.Tensor:
    return _kl(support.student_probs, support.teacher_probs)


def reverse_kl(support: SupportSet) -> torch.Tensor:
    return _kl(support.teacher_probs, support.student_probs)


def js_divergence(support: SupportSet) -> torch.Tensor:
    p = support.student_probs
    q = support.teacher_probs
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


_DIVERGENCES = {
    Divergence.FKL: forward_kl,
    Divergence.RKL: reverse_kl,
    Divergence.JS: js_divergence,
}


def divergence(support: SupportSet, kind: Divergence) -> torch.Tensor:
    return _DIVERGENCES[Divergence(kind)](support)


def teacher_entropy(q: Union[Distribution, SupportSet, torch.Tensor, Sequence[float]]) -> torch.Tensor:
    if isinstance(q, Distribution):
        probs = q.probs
    elif isinstance(q, SupportSet):
        probs = q.teacher_probs
    else:
        probs = _t(q)
    return -torch.xlogy(probs, probs).sum(dim=-1)


def dynamic_weights(entropies: TensorLike, beta: float) -> torch.Tensor:
    """exp(-beta*H) normalized to mean 1; an empty set gives an empty tensor."""
    h = _t(entropies).detach().reshape(-1)
    if h.numel() == 0:
        return h.new_empty(0)
    # shifting by the minimum leaves the normalized weights unchanged
    raw = torch.exp(-beta * (h - h.min()))
    return raw / raw.mean()


def sdpo_token_loss(
    support: SupportSet,
    kind: Divergence,
    weight: TensorLike = 1.0,
    is_w: TensorLike = 1.0,
) -> torch.Tensor:
    return _t(weight) * _t(is_w) * divergence(support, kind)


def sdpo_logit_advantage(support: SupportSet) -> torch.Tensor:
    p = support.student_probs
    return -(torch.xlogy(p, p) - torch.xlogy(p, support.teacher_probs))


def routed_loss_mean(grpo_losses: torch.Tensor, sdpo_losses: torch.Tensor) -> torch.Tensor:
    total = grpo_losses.numel() + sdpo_losses.numel()
    if total == 0:
        raise EmptyObjectiveError("no valid tokens in either branch")
    return torch.cat([grpo_losses.reshape(-1), sdpo_losses.reshape(-1)]).sum() / total


def combined_loss(token_objectives: Sequence[TokenObjective]) -> float:
    valid = [t for t in token_objectives if t.valid]
    grpo = _t([t.loss for t in valid if t.branch is Branch.GRPO])
    sdpo = _t([t.loss for t in valid if t.branch is Branch.SDPO])
    return float(routed_loss_mean(grpo, sdpo))


def advantage_mix(a_grpo: TensorLike, a_sdpo: TensorLike, lam: float) -> torch.Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    return lam * _t(a_grpo) + (1.0 - lam) * _t(a_sdpo)
