from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, NewType, Optional, Sequence

TokenId = NewType("TokenId", int)

# Vocabulary layout shared by environments, model and sampler.
DIGIT_TOKENS: tuple[int, ...] = tuple(range(10))
SEP = 10
EOS = 11
PAD = 12
TEACH = 13
CONTROL_TOKENS: tuple[int, ...] = (SEP, EOS, PAD, TEACH)
MIN_VOCAB_SIZE = 14


class Branch(str, Enum):
    GRPO = "GRPO"
    SDPO = "SDPO"


def check_tokens(tokens: Sequence[int], vocab_size: int) -> tuple[TokenId, ...]:
    out: list[TokenId] = []
    for pos, token in enumerate(tokens):
        value = int(token)
        if not 0 <= value < vocab_size:
            raise ValueError(
                f"token {value} at position {pos} is outside vocabulary of size {vocab_size}"
            )
        out.append(TokenId(value))
    return tuple(out)


@dataclass(frozen=True)
class Rollout:
    prompt: tuple[int, ...]
    response: tuple[int, ...]
    behavior_logprobs: tuple[float, ...]
    reward: Optional[float] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "response", tuple(int(t) for t in self.response))
        object.__setattr__(
            self, "behavior_logprobs", tuple(float(x) for x in self.behavior_logprobs)
        )
        if not self.response:
            raise ValueError("rollout response must be nonempty")
        if len(self.behavior_logprobs) != len(self.response):
            raise ValueError(
                "behavior_logprobs length "
                f"{len(self.behavior_logprobs)} != response length {len(self.response)}"
            )
        if any(lp > 0.0 for lp in self.behavior_logprobs):
            raise ValueError("behavior_logprobs must be <= 0")
        if self.reward is not None:
            reward = float(self.reward)
            if not 0.0 <= reward <= 1.0:
                raise ValueError(f"reward {reward} outside [0, 1]")
            object.__setattr__(self, "reward", reward)

    def with_reward(self, reward: float) -> "Rollout":
        return Rollout(
            prompt=self.prompt,
            response=self.response,
            behavior_logprobs=self.behavior_logprobs,
            reward=reward,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt": list(self.prompt),
            "response": list(self.response),
            "behavior_logprobs": list(self.behavior_logprobs),
            "reward": self.reward,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Rollout":
        return cls(
            prompt=tuple(data["prompt"]),
            response=tuple(data["response"]),
            behavior_logprobs=tuple(data["behavior_logprobs"]),
            reward=data.get("reward"),
        )


@dataclass(frozen=True)
class RolloutGroup:
    prompt: tuple[int, ...]
    rollouts: tuple[Rollout, ...]
    group_id: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "rollouts", tuple(self.rollouts))
        if len(self.rollouts) < 2:
            raise ValueError("group_size must be ≥ 2")
        for idx, rollout in enumerate(self.rollouts):
            if rollout.prompt != self.prompt:
                raise ValueError(f"rollout {idx} does not share the group prompt")

    @property
    def size(self) -> int:
        return len(self.rollouts)

    @property
    def rewards(self) -> list[float]:
        out: list[float] = []
        for idx, rollout in enumerate(self.rollouts):
            if rollout.reward is None:
                raise ValueError(f"rollout {idx} of group {self.group_id} has no reward")
            out.append(rollout.reward)
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt": list(self.prompt),
            "rollouts": [r.to_dict() for r in self.rollouts],
            "group_id": self.group_id,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RolloutGroup":
        return cls(
            prompt=tuple(data["prompt"]),
            rollouts=tuple(Rollout.from_dict(r) for r in data["rollouts"]),
            group_id=int(data["group_id"]),
        )


@dataclass(frozen=True)
class RoutingDecision:
    correct: bool
    teacher_available: bool
    branch: Branch
    teacher_index: Optional[int] = None
    rollout_index: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "branch", Branch(self.branch))
        expected_sdpo = (not self.correct) and self.teacher_available
        if (self.branch is Branch.SDPO) != expected_sdpo:
            raise ValueError(
                f"branch {self.branch.value} inconsistent with "
                f"correct={self.correct}, teacher_available={self.teacher_available}"
            )
        if (self.teacher_index is not None) != self.teacher_available:
            raise ValueError("teacher_index must be present iff teacher_available")
        if (
            self.teacher_index is not None
            and self.rollout_index is not None
            and self.teacher_index == self.rollout_index
        ):
            raise ValueError("a rollout cannot be its own teacher")

    @property
    def z_sdpo(self) -> int:
        return int(self.branch is Branch.SDPO)

    @property
    def z_grpo(self) -> int:
        return 1 - self.z_sdpo

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["branch"] = self.branch.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RoutingDecision":
        return cls(
            correct=bool(data["correct"]),
            teacher_available=bool(data["teacher_available"]),
            branch=Branch(data["branch"]),
            teacher_index=data.get("teacher_index"),
            rollout_index=data.get("rollout_index"),
        )


@dataclass(frozen=True)
class TokenObjective:
    rollout_index: int
    position: int
    branch: Branch
    loss: float
    weight: float = 1.0
    valid: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "branch", Branch(self.branch))
        if self.valid and not self.weight > 0.0:
            raise ValueError(f"valid token weight must be > 0, got {self.weight}")

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["branch"] = self.branch.value
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TokenObjective":
        return cls(
            rollout_index=int(data["rollout_index"]),
            position=int(data["position"]),
            branch=Branch(data["branch"]),
            loss=float(data["loss"]),
            weight=float(data["weight"]),
            valid=bool(data["valid"]),
        )


@dataclass(frozen=True)
class RoutingStats:
    grpo_fraction: float
    sdpo_fraction: float
    teacher_avail_fraction: float
    count: int = field(default=0)
