import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from core.config import ModelConfig
from core.types import PAD

logger = logging.getLogger(__name__)

DTYPE = torch.float64
LN_EPS = 1e-5


class ContextTooLongError(ValueError):
    pass


class ParamShapeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, batch_id: Optional[str], value: float):
        self.batch_id = batch_id
        self.value = value
        super().__init__(f"non-finite loss {value} (batch={batch_id})")


def param_layout(mcfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = mcfg.embed_dim
    hidden = d * mcfg.mlp_expansion
    layout: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (mcfg.vocab_size, d)),
        ("pos_emb", (mcfg.context_len, d)),
    ]
    for layer in range(mcfg.num_layers):
        p = f"layers.{layer}."
        layout += [
            (p + "ln1.weight", (d,)),
            (p + "ln1.bias", (d,)),
            (p + "attn.qkv.weight", (d, 3 * d)),
            (p + "attn.qkv.bias", (3 * d,)),
            (p + "attn.out.weight", (d, d)),
            (p + "attn.out.bias", (d,)),
            (p + "ln2.weight", (d,)),
            (p + "ln2.bias", (d,)),
            (p + "mlp.in.weight", (d, hidden)),
            (p + "mlp.in.bias", (hidden,)),
            (p + "mlp.out.weight", (hidden, d)),
            (p + "mlp.out.bias", (d,)),
        ]
    layout += [
        ("ln_f.weight", (d,)),
        ("ln_f.bias", (d,)),
        ("head.weight", (d, mcfg.vocab_size)),
        ("head.bias", (mcfg.vocab_size,)),
    ]
    return layout


def param_count(mcfg: ModelConfig) -> int:
    d = mcfg.embed_dim
    h = d * mcfg.mlp_expansion
    v = mcfg.vocab_size
    per_layer = 4 * d * d + 2 * d * h + 9 * d + h
    return (v + mcfg.context_len) * d + mcfg.num_layers * per_layer + 2 * d + d * v + v


@dataclass(frozen=True, eq=False)
class PolicyParams:
    config: ModelConfig
    flat: torch.Tensor

    def __post_init__(self) -> None:
        expected = param_count(self.config)
        if self.flat.dim() != 1 or self.flat.numel() != expected:
            raise ParamShapeError(
                f"flat vector has shape {tuple(self.flat.shape)}, expected ({expected},)"
            )
        if self.flat.dtype != DTYPE:
            raise ParamShapeError(f"flat vector must be {DTYPE}, got {self.flat.dtype}")

    @property
    def num_params(self) -> int:
        return self.flat.numel()

    def views(self) -> dict[str, torch.Tensor]:
        layout = param_layout(self.config)
        sizes = [math.prod(shape) for _, shape in layout]
        chunks = torch.split(self.flat, sizes)
        return {name: chunk.view(shape) for (name, shape), chunk in zip(layout, chunks)}

    def clone(self) -> "PolicyParams":
        return PolicyParams(self.config, self.flat.detach().clone())


@dataclass(frozen=True, eq=False)
class Distribution:
    logprobs: torch.Tensor

    def __post_init__(self) -> None:
        if self.logprobs.dim() != 1:
            raise ValueError("Distribution holds a single vocabulary row")

    @property
    def probs(self) -> torch.Tensor:
        return self.logprobs.exp()

    def logsumexp(self) -> float:
        return float(torch.logsumexp(self.logprobs.detach(), dim=-1))


def init_params(mcfg: ModelConfig, seed: int) -> PolicyParams:
    gen = torch.Generator().manual_seed(int(seed))
    out_scale = 1.0 / math.sqrt(2 * mcfg.num_layers)
    chunks: list[torch.Tensor] = []
    for name, shape in param_layout(mcfg):
        n = math.prod(shape)
        kind = name.rsplit(".", 1)[-1]
        module = name.split(".")[-2] if "." in name else name
        if kind == "bias":
            chunks.append(torch.zeros(n, dtype=DTYPE))
        elif module.startswith("ln"):
            chunks.append(torch.ones(n, dtype=DTYPE))
        else:
            std = mcfg.init_std
            if name.endswith(("attn.out.weight", "mlp.out.weight")):
                std *= out_scale
            chunks.append(torch.randn(n, generator=gen, dtype=DTYPE) * std)
    return PolicyParams(mcfg, torch.cat(chunks))


def forward_logprobs(params: PolicyParams, tokens: torch.Tensor) -> torch.Tensor:
    squeeze = tokens.dim() == 1
    if squeeze:
        tokens = tokens.unsqueeze(0)
    cfg = params.config
    batch, length = tokens.shape
    if length > cfg.context_len:
        raise ContextTooLongError(f"context of length {length} exceeds {cfg.context_len}")
    if length == 0:
        raise ContextTooLongError("context must hold at least one token")

    w = params.views()
    d = cfg.embed_dim
    heads = cfg.num_heads
    head_dim = d // heads
    causal = torch.ones(length, length, dtype=torch.bool).triu(1)

    x = w["tok_emb"][tokens] + w["pos_emb"][:length]
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        h = F.layer_norm(x, (d,), w[p + "ln1.weight"], w[p + "ln1.bias"], LN_EPS)
        qkv = h @ w[p + "attn.qkv.weight"] + w[p + "attn.qkv.bias"]
        q, k, v = qkv.split(d, dim=-1)
        q = q.view(batch, length, heads, head_dim).transpose(1, 2)
        k = k.view(batch, length, heads, head_dim).transpose(1, 2)
        v = v.view(batch, length, heads, head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(head_dim)
        attn = torch.softmax(scores.masked_fill(causal, float("-inf")), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(batch, length, d)
        x = x + mixed @ w[p + "attn.out.weight"] + w[p + "attn.out.bias"]
        h = F.layer_norm(x, (d,), w[p + "ln2.weight"], w[p + "ln2.bias"], LN_EPS)
        x = x + F.gelu(h @ w[p + "mlp.in.weight"] + w[p + "mlp.in.bias"]) @ w[
            p + "mlp.out.weight"
        ] + w[p + "mlp.out.bias"]
    x = F.layer_norm(x, (d,), w["ln_f.weight"], w["ln_f.bias"], LN_EPS)
    logits = x @ w["head.weight"] + w["head.bias"]
    out = torch.log_softmax(logits, dim=-1)
    return out[0] if squeeze else out


def _as_tokens(tokens: Sequence[int]) -> torch.Tensor:
    return torch.as_tensor([int(t) for t in tokens], dtype=torch.long)


def next_token_distribution(params: PolicyParams, context: Sequence[int]) -> Distribution:
    if not context:
        raise ContextTooLongError("context must hold at least one token")
    return Distribution(forward_logprobs(params, _as_tokens(context))[-1])


def score_batch(
    params: PolicyParams,
    prefixes: Sequence[Sequence[int]],
    responses: Sequence[Sequence[int]],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Score many (prefix, response) pairs in one right-padded forward pass.

    Returns log-probs of shape (B, R, V) where row t predicts response token t,
    and a boolean validity mask of shape (B, R).
    """
    if len(prefixes) != len(responses):
        raise ValueError("prefixes and responses must align")
    prefix_lens = torch.as_tensor([len(p) for p in prefixes], dtype=torch.long)
    response_lens = torch.as_tensor([len(r) for r in responses], dtype=torch.long)
    if (prefix_lens < 1).any() or (response_lens < 1).any():
        raise ValueError("prefix and response must both be nonempty")
    total = prefix_lens + response_lens - 1
    width = int(total.max())
    if width > params.config.context_len:
        raise ContextTooLongError(
            f"prefix + response of length {width + 1} exceeds context {params.config.context_len}"
        )
    tokens = torch.full((len(prefixes), width), PAD, dtype=torch.long)
    for row, (prefix, response) in enumerate(zip(prefixes, responses)):
        seq = (list(prefix) + list(response))[:-1]
        tokens[row, : len(seq)] = _as_tokens(seq)
    logprobs = forward_logprobs(params, tokens)

    span = int(response_lens.max())
    offsets = torch.arange(span)
    positions = (prefix_lens[:, None] - 1 + offsets[None, :]).clamp(max=width - 1)
    rows = torch.arange(len(prefixes))[:, None]
    mask = offsets[None, :] < response_lens[:, None]
    return logprobs[rows, positions], mask


def score_trajectory(
    params: PolicyParams,
    prefix: Sequence[int],
    response: Sequence[int],
) -> list[Distribution]:
    logprobs, _ = score_batch(params, [prefix], [response])
    return [Distribution(logprobs[0, t]) for t in range(len(response))]


def loss_gradient(
    params: PolicyParams,
    loss_evaluator: Callable[[PolicyParams], Union[torch.Tensor, float]],
    batch_id: Optional[str] = None,
) -> tuple[float, torch.Tensor]:
    leaf = params.flat.detach().clone().requires_grad_(True)
    loss = loss_evaluator(PolicyParams(params.config, leaf))
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss, dtype=DTYPE)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(batch_id, value)
    if not loss.requires_grad:
        return value, torch.zeros_like(params.flat)
    (grad,) = torch.autograd.grad(loss, leaf, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(params.flat)
    return value, grad.detach()


def ema_update(teacher: PolicyParams, student: PolicyParams, alpha: float) -> PolicyParams:
    if teacher.config != student.config or teacher.flat.shape != student.flat.shape:
        raise ParamShapeError("teacher and student parameter shapes differ")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha {alpha} outside [0, 1]")
    with torch.no_grad():
        flat = (1.0 - alpha) * teacher.flat + alpha * student.flat
    return PolicyParams(teacher.config, flat)
