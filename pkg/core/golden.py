import json
import logging
import math
from pathlib import Path
from typing import Any, Callable

import torch

from core.config import Divergence
from core.routing import route_rollout
from core.types import Branch, TokenObjective
from mlcore import objective as obj

logger = logging.getLogger(__name__)

GOLDEN_TOL = 1e-9

LN2 = math.log(2.0)


def _support(q: list[float], p: list[float]) -> obj.SupportSet:
    return obj.SupportSet.from_probs(q, p)


def _fkl(p: list[float], q: list[float]) -> float:
    return float(obj.forward_kl(_support(q, p)))


def _rkl(p: list[float], q: list[float]) -> float:
    return float(obj.reverse_kl(_support(q, p)))


def _js(p: list[float], q: list[float]) -> float:
    return float(obj.js_divergence(_support(q, p)))


def _topk(teacher: list[float], k: int) -> dict[str, Any]:
    logq = torch.log(torch.as_tensor(teacher, dtype=torch.float64))
    uniform = torch.full_like(logq, -math.log(len(teacher)))
    support = obj.topk_support(logq, uniform, k)
    return {
        "indices": support.indices.tolist(),
        "teacher_probs": support.teacher_probs.tolist(),
    }


def _combined(grpo: list[float], sdpo: list[float]) -> float:
    tokens = [TokenObjective(i, 0, Branch.GRPO, loss) for i, loss in enumerate(grpo)]
    tokens += [TokenObjective(len(grpo) + i, 0, Branch.SDPO, loss) for i, loss in enumerate(sdpo)]
    return obj.combined_loss(tokens)


def _as_list(value: Any) -> Any:
    if torch.is_tensor(value):
        return value.tolist()
    return value


# (operation, inputs, expected, evaluator)
_CASES: list[tuple[str, dict[str, Any], Any, Callable[..., Any]]] = [
    ("group_relative_advantages", {"rewards": [1.0] * 8, "adv_eps": 1e-4}, [0.0] * 8,
     obj.group_relative_advantages),
    ("group_relative_advantages", {"rewards": [1.0, 0.0], "adv_eps": 0.0}, [1.0, -1.0],
     obj.group_relative_advantages),
    ("group_relative_advantages", {"rewards": [1.0, 1.0] + [0.0] * 6, "adv_eps": 0.0},
     [0.75 / math.sqrt(0.1875)] * 2 + [-0.25 / math.sqrt(0.1875)] * 6,
     obj.group_relative_advantages),
    ("is_weight", {"logprob_current": 0.0, "logprob_behavior": 0.0, "rho": 2.0}, 1.0, obj.is_weight),
    ("is_weight", {"logprob_current": math.log(4.0), "logprob_behavior": 0.0, "rho": 2.0}, 2.0,
     obj.is_weight),
    ("is_weight", {"logprob_current": math.log(0.5), "logprob_behavior": 0.0, "rho": 2.0}, 0.5,
     obj.is_weight),
    ("grpo_token_loss",
     {"logprob_new": 0.0, "logprob_old": 0.0, "advantage": 2.0, "eps_low": 0.2, "eps_high": 0.28},
     -2.0, obj.grpo_token_loss),
    ("grpo_token_loss",
     {"logprob_new": math.log(1.5), "logprob_old": 0.0, "advantage": 1.0, "eps_low": 0.2,
      "eps_high": 0.28},
     -1.28, obj.grpo_token_loss),
    ("grpo_token_loss",
     {"logprob_new": math.log(0.5), "logprob_old": 0.0, "advantage": -1.0, "eps_low": 0.2,
      "eps_high": 0.28},
     0.8, obj.grpo_token_loss),
    ("topk_support", {"teacher": [0.5, 0.3, 0.1, 0.1], "k": 2},
     {"indices": [0, 1], "teacher_probs": [0.625, 0.375]}, _topk),
    ("topk_support", {"teacher": [0.4, 0.2, 0.2, 0.2], "k": 2},
     {"indices": [0, 1], "teacher_probs": [2.0 / 3.0, 1.0 / 3.0]}, _topk),
    ("forward_kl", {"p": [0.3, 0.7], "q": [0.3, 0.7]}, 0.0, _fkl),
    ("forward_kl", {"p": [1.0, 0.0], "q": [0.5, 0.5]}, LN2, _fkl),
    ("forward_kl", {"p": [0.5, 0.5], "q": [0.25, 0.75]},
     0.5 * LN2 + 0.5 * math.log(2.0 / 3.0), _fkl),
    ("reverse_kl", {"p": [0.3, 0.7], "q": [0.3, 0.7]}, 0.0, _rkl),
    ("reverse_kl", {"p": [0.5, 0.5], "q": [0.25, 0.75]},
     0.25 * math.log(0.5) + 0.75 * math.log(1.5), _rkl),
    ("js_divergence", {"p": [0.3, 0.7], "q": [0.3, 0.7]}, 0.0, _js),
    ("js_divergence", {"p": [1.0, 0.0], "q": [0.0, 1.0]}, LN2, _js),
    ("js_divergence", {"p": [1.0, 0.0], "q": [0.5, 0.5]},
     0.5 * math.log(4.0 / 3.0) + 0.5 * (0.5 * math.log(2.0 / 3.0) + 0.5 * LN2), _js),
    ("teacher_entropy", {"q": [0.25] * 4}, math.log(4.0), obj.teacher_entropy),
    ("teacher_entropy", {"q": [1.0, 0.0, 0.0, 0.0]}, 0.0, obj.teacher_entropy),
    ("teacher_entropy", {"q": [0.5, 0.5, 0.0, 0.0]}, LN2, obj.teacher_entropy),
    ("dynamic_weights", {"entropies": [0.1, 0.7, 1.3], "beta": 0.0}, [1.0, 1.0, 1.0],
     obj.dynamic_weights),
    ("dynamic_weights", {"entropies": [0.9, 0.9], "beta": 1.0}, [1.0, 1.0], obj.dynamic_weights),
    ("dynamic_weights", {"entropies": [0.0, LN2], "beta": 1.0}, [4.0 / 3.0, 2.0 / 3.0],
     obj.dynamic_weights),
    ("sdpo_token_loss", {"p": [1.0, 0.0], "q": [0.5, 0.5], "weight": 1.0, "is_w": 1.0}, LN2,
     lambda p, q, weight, is_w: float(
         obj.sdpo_token_loss(_support(q, p), Divergence.FKL, weight, is_w))),
    ("sdpo_token_loss", {"p": [1.0, 0.0], "q": [0.5, 0.5], "weight": 4.0 / 3.0, "is_w": 0.75},
     LN2, lambda p, q, weight, is_w: float(
         obj.sdpo_token_loss(_support(q, p), Divergence.FKL, weight, is_w))),
    ("sdpo_token_loss", {"p": [0.3, 0.7], "q": [0.3, 0.7], "weight": 4.0 / 3.0, "is_w": 1.0},
     0.0, lambda p, q, weight, is_w: float(
         obj.sdpo_token_loss(_support(q, p), Divergence.JS, weight, is_w))),
    ("sdpo_logit_advantage", {"p": [0.3, 0.7], "q": [0.3, 0.7]}, [0.0, 0.0],
     lambda p, q: obj.sdpo_logit_advantage(_support(q, p))),
    ("sdpo_logit_advantage", {"p": [0.5, 0.5], "q": [0.25, 0.75]},
     [-0.5 * LN2, -0.5 * math.log(2.0 / 3.0)],
     lambda p, q: obj.sdpo_logit_advantage(_support(q, p))),
    ("combined_loss", {"grpo": [1.0, 3.0], "sdpo": []}, 2.0, _combined),
    ("combined_loss", {"grpo": [], "sdpo": [0.5, 1.5, 1.0]}, 1.0, _combined),
    ("combined_loss", {"grpo": [1.0, 3.0], "sdpo": [2.0, 2.0]}, 2.0, _combined),
    ("advantage_mix", {"a_grpo": 1.0, "a_sdpo": -0.5, "lam": 1.0}, 1.0, obj.advantage_mix),
    ("advantage_mix", {"a_grpo": 1.0, "a_sdpo": -0.5, "lam": 0.0}, -0.5, obj.advantage_mix),
    ("advantage_mix", {"a_grpo": 1.0, "a_sdpo": -0.5, "lam": 0.9}, 0.85, obj.advantage_mix),
]

_ROUTING_TABLE = [
    ({"correct": True, "teacher_available": True}, Branch.GRPO.value),
    ({"correct": True, "teacher_available": False}, Branch.GRPO.value),
    ({"correct": False, "teacher_available": True}, Branch.SDPO.value),
    ({"correct": False, "teacher_available": False}, Branch.GRPO.value),
]


def _max_abs_error(expected: Any, actual: Any) -> float:
    if isinstance(expected, dict):
        return max(_max_abs_error(expected[key], actual[key]) for key in expected)
    if isinstance(expected, list):
        if not isinstance(actual, list) or len(actual) != len(expected):
            return math.inf
        return max((_max_abs_error(e, a) for e, a in zip(expected, actual)), default=0.0)
    return abs(float(expected) - float(actual))


def golden_cases() -> list[dict[str, Any]]:
    cases: list[dict[str, Any]] = []
    for op, inputs, expected, fn in _CASES:
        actual = _as_list(fn(**inputs))
        error = _max_abs_error(expected, actual)
        cases.append(
            {
                "op": op,
                "inputs": inputs,
                "expected": expected,
                "actual": actual,
                "abs_error": error,
                "ok": error <= GOLDEN_TOL,
            }
        )
    for inputs, expected in _ROUTING_TABLE:
        actual = route_rollout(**inputs).value
        cases.append(
            {
                "op": "route_rollout",
                "inputs": inputs,
                "expected": expected,
                "actual": actual,
                "abs_error": 0.0 if actual == expected else math.inf,
                "ok": actual == expected,
            }
        )
    return cases


def write_golden(path: str) -> list[dict[str, Any]]:
    cases = golden_cases()
    out_file = Path(path)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    out_file.write_text(
        json.dumps({"tolerance": GOLDEN_TOL, "cases": cases}, indent=2) + "\n",
        encoding="utf-8",
    )
    failed = [case for case in cases if not case["ok"]]
    logger.info("wrote %d golden cases to %s (%d failing)", len(cases), out_file, len(failed))
    return cases
