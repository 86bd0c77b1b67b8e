import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from core.types import DIGIT_TOKENS, EOS, SEP, TEACH, CONTROL_TOKENS, RolloutGroup

logger = logging.getLogger(__name__)

CORRECT_THRESHOLD = 0.5


class EnvKind(str, Enum):
    COPY_SORT = "CopySort"
    MOD_ARITH = "ModArith"


@dataclass(frozen=True)
class EnvSpec:
    kind: EnvKind = EnvKind.COPY_SORT
    min_len: int = 3
    max_len: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EnvKind(self.kind))
        if set(DIGIT_TOKENS) & set(CONTROL_TOKENS):
            raise ValueError("control tokens overlap digit tokens")

    @property
    def max_prompt_len(self) -> int:
        if self.kind is EnvKind.MOD_ARITH:
            return 3
        return self.max_len + 1

    @property
    def max_solution_len(self) -> int:
        if self.kind is EnvKind.MOD_ARITH:
            return 2
        return self.max_len + 1


@dataclass(frozen=True)
class TeacherContext:
    tokens: tuple[int, ...]
    source_rollout: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if self.tokens.count(TEACH) != 1:
            raise ValueError("teacher context must contain exactly one TEACH marker")


def gen_task(env: EnvSpec, rng: np.random.Generator) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if env.kind is EnvKind.MOD_ARITH:
        d1, d2 = (int(x) for x in rng.integers(0, 10, size=2))
        prompt = (d1, d2, SEP)
    else:
        length = int(rng.integers(env.min_len, env.max_len + 1))
        digits = tuple(int(x) for x in rng.integers(0, 10, size=length))
        prompt = digits + (SEP,)
    return prompt, solve(env, prompt)


def solve(env: EnvSpec, prompt: Sequence[int]) -> tuple[int, ...]:
    """Hidden solution recovered from a well-formed prompt."""
    digits = [int(t) for t in prompt if t != SEP]
    if env.kind is EnvKind.MOD_ARITH:
        return ((digits[0] + digits[1]) % 10, EOS)
    return tuple(sorted(digits)) + (EOS,)


def verify(env: EnvSpec, prompt: Sequence[int], response: Sequence[int]) -> float:
    return 1.0 if tuple(int(t) for t in response) == solve(env, prompt) else 0.0


def is_correct(reward: float) -> bool:
    return reward >= CORRECT_THRESHOLD


def correct_siblings(group: RolloutGroup, i: int) -> list[int]:
    return [
        j
        for j, reward in enumerate(group.rewards)
        if j != i and is_correct(reward)
    ]


def build_teacher_context(
    group: RolloutGroup,
    i: int,
    rng: np.random.Generator,
) -> Optional[TeacherContext]:
    if not 0 <= i < group.size:
        raise IndexError(f"rollout index {i} outside group of size {group.size}")
    candidates = correct_siblings(group, i)
    if not candidates:
        return None
    j = candidates[int(rng.integers(0, len(candidates)))]
    tokens = group.prompt + (TEACH,) + group.rollouts[j].response + (SEP,)
    return TeacherContext(tokens=tokens, source_rollout=j)


def build_group_contexts(
    group: RolloutGroup, rng: np.random.Generator
) -> list[Optional[TeacherContext]]:
    return [build_teacher_context(group, i, rng) for i in range(group.size)]


def eval_prompts(env: EnvSpec, count: int) -> list[tuple[int, ...]]:
    rng = np.random.default_rng((env.seed, 7919))
    return [gen_task(env, rng)[0] for _ in range(count)]


def dump_tasks(env: EnvSpec, count: int, path: str, seed: int) -> int:
    out_file = Path(path)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines: list[str] = []
    for _ in range(count):
        prompt, solution = gen_task(env, rng)
        lines.append(json.dumps({"prompt": list(prompt), "solution": list(solution)}))
    out_file.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    logger.info("dumped %d %s tasks to %s", count, env.kind.value, out_file)
    return count
