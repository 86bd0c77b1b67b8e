"""Functional AdamW step over the flat parameter vector, plus the warmup schedule."""
import logging
from dataclasses import dataclass
from typing import Optional

import torch

from mlcore.policy.model import DTYPE, ParamShapeError, PolicyParams

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, batch_id: Optional[str], detail: str):
        self.batch_id = batch_id
        super().__init__(f"non-finite gradient (batch={batch_id}): {detail}")


@dataclass(frozen=True, eq=False)
class AdamMoments:
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "AdamMoments":
        return cls(
            exp_avg=torch.zeros_like(params.flat, dtype=DTYPE),
            exp_avg_sq=torch.zeros_like(params.flat, dtype=DTYPE),
            step=0,
        )


def lr_schedule(step: int, base_lr: float, warmup_steps: int) -> float:
    if step < 0:
        raise ValueError("step must be ≥ 0")
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def optimizer_update(
    params: PolicyParams,
    grads: torch.Tensor,
    moments: AdamMoments,
    lr_t: float,
    weight_decay: float,
    clip_norm: float,
    batch_id: Optional[str] = None,
) -> tuple[PolicyParams, AdamMoments, float]:
    """Clip to `clip_norm`, then one decoupled-weight-decay Adam step.

    Returns the new parameters, the new moments and the post-clip gradient norm.
    """
    shape = params.flat.shape
    if grads.shape != shape or moments.exp_avg.shape != shape or moments.exp_avg_sq.shape != shape:
        raise ParamShapeError("gradient or moment shape does not match parameters")

    param = torch.nn.Parameter(params.flat.detach().clone())
    param.grad = grads.detach().to(DTYPE).clone()
    try:
        pre_clip = torch.nn.utils.clip_grad_norm_([param], clip_norm, error_if_nonfinite=True)
    except RuntimeError as exc:
        raise NonFiniteGradientError(batch_id, str(exc)) from exc
    post_clip = float(param.grad.norm())
    logger.debug("batch=%s grad_norm pre=%.6g post=%.6g", batch_id, float(pre_clip), post_clip)

    optimizer = torch.optim.AdamW(
        [param],
        lr=lr_t,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=weight_decay,
        foreach=False,
    )
    optimizer.state[param] = {
        "step": torch.tensor(float(moments.step)),
        "exp_avg": moments.exp_avg.detach().clone(),
        "exp_avg_sq": moments.exp_avg_sq.detach().clone(),
    }
    optimizer.step()
    state = optimizer.state[param]
    new_moments = AdamMoments(
        exp_avg=state["exp_avg"].detach().clone(),
        exp_avg_sq=state["exp_avg_sq"].detach().clone(),
        step=int(state["step"].item()),
    )
    return PolicyParams(params.config, param.detach().clone()), new_moments, post_clip
