import logging
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
import torch

from core.types import EOS, Rollout
from mlcore.policy.model import ContextTooLongError, PolicyParams, forward_logprobs, score_batch

logger = logging.getLogger(__name__)

GREEDY_TEMPERATURE = 1e-6


class Policy(Protocol):
    def sample(
        self,
        prompt: Sequence[int],
        n: int,
        max_len: int,
        temperature: float,
        top_p: float,
        rng: np.random.Generator,
    ) -> list[Rollout]:
        ...


def nucleus_probs(logprobs: torch.Tensor, temperature: float, top_p: float) -> np.ndarray:
    probs = torch.softmax(logprobs.detach() / temperature, dim=-1).numpy()
    if top_p >= 1.0:
        return probs
    order = np.argsort(-probs, axis=-1, kind="stable")
    ranked = np.take_along_axis(probs, order, axis=-1)
    before = np.cumsum(ranked, axis=-1) - ranked
    keep_ranked = before < top_p
    keep = np.zeros_like(keep_ranked)
    np.put_along_axis(keep, order, keep_ranked, axis=-1)
    truncated = np.where(keep, probs, 0.0)
    return truncated / truncated.sum(axis=-1, keepdims=True)


def _draw(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_rollouts(
    params: PolicyParams,
    prompt: Sequence[int],
    n: int,
    max_len: int,
    temperature: float = 1.0,
    top_p: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    stop_token: int = EOS,
) -> list[Rollout]:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    if not 0 < top_p <= 1:
        raise ValueError("top_p must be in (0, 1]")
    if n < 1 or max_len < 1:
        raise ValueError("n and max_len must be ≥ 1")
    greedy = temperature < GREEDY_TEMPERATURE
    if rng is None and not greedy:
        raise ValueError("stochastic sampling needs an rng")
    prompt = tuple(int(t) for t in prompt)
    if len(prompt) + max_len - 1 > params.config.context_len:
        raise ContextTooLongError(
            f"prompt of length {len(prompt)} plus {max_len} new tokens exceeds "
            f"context {params.config.context_len}"
        )

    seqs = torch.as_tensor([list(prompt)] * n, dtype=torch.long)
    responses: list[list[int]] = [[] for _ in range(n)]
    behavior: list[list[float]] = [[] for _ in range(n)]
    alive = np.ones(n, dtype=bool)
    with torch.no_grad():
        for _ in range(max_len):
            last = forward_logprobs(params, seqs)[:, -1, :]
            if greedy:
                choice = last.argmax(dim=-1).numpy()
            else:
                choice = _draw(nucleus_probs(last, temperature, top_p), rng)
            last_np = last.numpy()
            for row in np.flatnonzero(alive):
                token = int(choice[row])
                responses[row].append(token)
                behavior[row].append(float(last_np[row, token]))
                if token == stop_token:
                    alive[row] = False
            if not alive.any():
                break
            seqs = torch.cat([seqs, torch.as_tensor(choice, dtype=torch.long)[:, None]], dim=1)
    return [Rollout(prompt, tuple(r), tuple(b)) for r, b in zip(responses, behavior)]


def sample_rollout(
    params: PolicyParams,
    prompt: Sequence[int],
    max_len: int,
    temperature: float = 1.0,
    top_p: float = 1.0,
    rng: Optional[np.random.Generator] = None,
) -> Rollout:
    return sample_rollouts(params, prompt, 1, max_len, temperature, top_p, rng)[0]


def rollout_from_response(
    params: PolicyParams,
    prompt: Sequence[int],
    response: Sequence[int],
    reward: Optional[float] = None,
) -> Rollout:
    with torch.no_grad():
        logprobs, _ = score_batch(params, [prompt], [response])
    picked = logprobs[0, torch.arange(len(response)), torch.as_tensor(list(response))]
    return Rollout(tuple(prompt), tuple(response), tuple(picked.tolist()), reward)


@dataclass(frozen=True, eq=False)
class SampledPolicy:
    params: PolicyParams

    def sample(
        self,
        prompt: Sequence[int],
        n: int,
        max_len: int,
        temperature: float,
        top_p: float,
        rng: np.random.Generator,
    ) -> list[Rollout]:
        return sample_rollouts(self.params, prompt, n, max_len, temperature, top_p, rng)
