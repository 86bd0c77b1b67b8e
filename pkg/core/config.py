import dataclasses
import json
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Optional

import yaml

from core.env.tasks import EnvKind, EnvSpec
from core.types import MIN_VOCAB_SIZE


class Algorithm(str, Enum):
    GRPO = "GRPO"
    SDPO = "SDPO"
    SRPO = "SRPO"
    SRPO_NO_DW = "SRPO_NO_DW"
    ADV_MIX = "ADV_MIX"
    SDPO_FAILED_ONLY = "SDPO_FAILED_ONLY"
    SDPO_CORRECT_ONLY = "SDPO_CORRECT_ONLY"


ABLATION_VARIANTS: tuple[Algorithm, ...] = (
    Algorithm.GRPO,
    Algorithm.SDPO,
    Algorithm.SRPO,
    Algorithm.SRPO_NO_DW,
    Algorithm.ADV_MIX,
)


class Divergence(str, Enum):
    FKL = "FKL"
    RKL = "RKL"
    JS = "JS"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 14
    context_len: int = 64
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    mlp_expansion: int = 4
    init_std: float = 0.02


@dataclass(frozen=True)
class WarmstartConfig:
    max_steps: int = 600
    batch_size: int = 32
    learning_rate: float = 3e-3
    target_accuracy: float = 0.1
    check_interval: int = 10
    probe_prompts: int = 32
    probe_rollouts: int = 4
    teacher_format_fraction: float = 0.5


@dataclass(frozen=True)
class TrainConfig:
    algorithm: Algorithm = Algorithm.SRPO
    steps: int = 300
    group_size: int = 8
    question_batch_size: int = 8
    mini_batch_size: int = 8
    learning_rate: float = 2e-3
    warmup_steps: int = 10
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    eps_high: float = 0.28
    eps_low: float = 0.2
    is_clip_rho: float = 2.0
    divergence: Divergence = Divergence.JS
    top_k: int = 100
    ema_rate: float = 0.05
    dw_beta: float = 1.0
    adv_eps: float = 1e-4
    mix_lambda: float = 0.9
    rollout_temperature: float = 1.0
    rollout_top_p: float = 1.0
    eval_temperature: float = 0.6
    eval_top_p: float = 0.95
    eval_rollouts: int = 16
    eval_prompts: int = 32
    eval_interval: int = 10
    checkpoint_interval: int = 50
    seed: int = 0
    max_prompt_len: int = 6
    max_response_len: int = 8
    model: ModelConfig = field(default_factory=ModelConfig)
    env: EnvSpec = field(default_factory=EnvSpec)
    warmstart: WarmstartConfig = field(default_factory=WarmstartConfig)

    @property
    def num_mini_batches(self) -> int:
        return self.question_batch_size // self.mini_batch_size

    @property
    def max_teacher_prefix_len(self) -> int:
        # prompt + TEACH + sibling response + SEP
        return self.max_prompt_len + self.max_response_len + 2


@dataclass(frozen=True)
class ConfigIssue:
    code: str
    field: str
    message: str


class ConfigValidationError(ValueError):
    def __init__(self, issue: ConfigIssue):
        self.issue = issue
        super().__init__(f"{issue.code}: {issue.message} (field={issue.field})")


def _fail(code: str, field_name: str, message: str) -> typing.NoReturn:
    raise ConfigValidationError(ConfigIssue(code=code, field=field_name, message=message))


def validate_config(cfg: TrainConfig) -> TrainConfig:
    checks: list[tuple[bool, str, str]] = [
        (cfg.group_size >= 2, "group_size", "group_size must be ≥ 2"),
        (cfg.steps >= 0, "steps", "steps must be ≥ 0"),
        (cfg.question_batch_size >= 1, "question_batch_size", "question_batch_size must be ≥ 1"),
        (cfg.mini_batch_size >= 1, "mini_batch_size", "mini_batch_size must be ≥ 1"),
        (
            cfg.question_batch_size % max(cfg.mini_batch_size, 1) == 0,
            "mini_batch_size",
            "question_batch_size must be divisible by mini_batch_size",
        ),
        (cfg.learning_rate > 0, "learning_rate", "learning_rate must be > 0"),
        (cfg.warmup_steps >= 0, "warmup_steps", "warmup_steps must be ≥ 0"),
        (cfg.weight_decay >= 0, "weight_decay", "weight_decay must be ≥ 0"),
        (cfg.grad_clip_norm > 0, "grad_clip_norm", "grad_clip_norm must be > 0"),
        (0 < cfg.eps_low < 1, "eps_low", "eps_low out of (0,1)"),
        (cfg.eps_high > 0, "eps_high", "eps_high must be > 0"),
        (cfg.is_clip_rho >= 1, "is_clip_rho", "is_clip_rho must be ≥ 1"),
        (cfg.top_k >= 1, "top_k", "top_k must be ≥ 1"),
        (0.0 <= cfg.ema_rate <= 1.0, "ema_rate", "ema_rate out of [0,1]"),
        (cfg.dw_beta >= 0, "dw_beta", "dw_beta must be ≥ 0"),
        (cfg.adv_eps >= 0, "adv_eps", "adv_eps must be ≥ 0"),
        (0.0 <= cfg.mix_lambda <= 1.0, "mix_lambda", "mix_lambda out of [0,1]"),
        (cfg.rollout_temperature > 0, "rollout_temperature", "rollout_temperature must be > 0"),
        (0 < cfg.rollout_top_p <= 1, "rollout_top_p", "rollout_top_p out of (0,1]"),
        (cfg.eval_temperature > 0, "eval_temperature", "eval_temperature must be > 0"),
        (0 < cfg.eval_top_p <= 1, "eval_top_p", "eval_top_p out of (0,1]"),
        (cfg.eval_rollouts >= 1, "eval_rollouts", "eval_rollouts must be ≥ 1"),
        (cfg.eval_prompts >= 1, "eval_prompts", "eval_prompts must be ≥ 1"),
        (cfg.eval_interval >= 1, "eval_interval", "eval_interval must be ≥ 1"),
        (cfg.checkpoint_interval >= 1, "checkpoint_interval", "checkpoint_interval must be ≥ 1"),
        (cfg.max_prompt_len >= 1, "max_prompt_len", "max_prompt_len must be ≥ 1"),
        (cfg.max_response_len >= 1, "max_response_len", "max_response_len must be ≥ 1"),
    ]
    for ok, field_name, message in checks:
        if not ok:
            _fail("E_INVARIANT", field_name, message)

    m = cfg.model
    model_checks: list[tuple[bool, str, str]] = [
        (m.vocab_size >= MIN_VOCAB_SIZE, "model.vocab_size", f"vocab_size must be ≥ {MIN_VOCAB_SIZE}"),
        (m.embed_dim >= 1, "model.embed_dim", "embed_dim must be ≥ 1"),
        (m.num_heads >= 1, "model.num_heads", "num_heads must be ≥ 1"),
        (m.embed_dim % max(m.num_heads, 1) == 0, "model.num_heads", "embed_dim must be divisible by num_heads"),
        (m.num_layers >= 1, "model.num_layers", "num_layers must be ≥ 1"),
        (m.mlp_expansion >= 1, "model.mlp_expansion", "mlp_expansion must be ≥ 1"),
        (m.init_std > 0, "model.init_std", "init_std must be > 0"),
        (
            m.context_len >= cfg.max_prompt_len + cfg.max_response_len,
            "model.context_len",
            "context_len must be ≥ max_prompt_len + max_response_len",
        ),
        (
            m.context_len >= cfg.max_teacher_prefix_len + cfg.max_response_len,
            "model.context_len",
            "context_len must cover the longest teacher context",
        ),
    ]
    for ok, field_name, message in model_checks:
        if not ok:
            _fail("E_INVARIANT", field_name, message)

    e = cfg.env
    env_checks: list[tuple[bool, str, str]] = [
        (e.min_len >= 1, "env.min_len", "min_len must be ≥ 1"),
        (e.max_len >= e.min_len, "env.max_len", "max_len must be ≥ min_len"),
        (
            e.max_prompt_len <= cfg.max_prompt_len,
            "max_prompt_len",
            "max_prompt_len too small for the environment's prompts",
        ),
        (
            e.max_solution_len <= cfg.max_response_len,
            "max_response_len",
            "max_response_len too small for the environment's solutions",
        ),
    ]
    for ok, field_name, message in env_checks:
        if not ok:
            _fail("E_INVARIANT", field_name, message)

    w = cfg.warmstart
    warm_checks: list[tuple[bool, str, str]] = [
        (w.max_steps >= 0, "warmstart.max_steps", "max_steps must be ≥ 0"),
        (w.batch_size >= 1, "warmstart.batch_size", "batch_size must be ≥ 1"),
        (w.learning_rate > 0, "warmstart.learning_rate", "learning_rate must be > 0"),
        (0.0 <= w.target_accuracy <= 1.0, "warmstart.target_accuracy", "target_accuracy out of [0,1]"),
        (w.check_interval >= 1, "warmstart.check_interval", "check_interval must be ≥ 1"),
        (w.probe_prompts >= 1, "warmstart.probe_prompts", "probe_prompts must be ≥ 1"),
        (w.probe_rollouts >= 1, "warmstart.probe_rollouts", "probe_rollouts must be ≥ 1"),
        (
            0.0 <= w.teacher_format_fraction <= 1.0,
            "warmstart.teacher_format_fraction",
            "teacher_format_fraction out of [0,1]",
        ),
    ]
    for ok, field_name, message in warm_checks:
        if not ok:
            _fail("E_INVARIANT", field_name, message)
    return cfg


def _coerce(value: Any, target: Any, path: str) -> Any:
    if dataclasses.is_dataclass(target):
        if isinstance(value, target):
            return value
        if not isinstance(value, dict):
            _fail("E_TYPE", path, f"'{path}' must be an object")
        return _build(target, value, prefix=f"{path}.")
    if isinstance(target, type) and issubclass(target, Enum):
        try:
            return target(value)
        except ValueError:
            allowed = ", ".join(member.value for member in target)
            _fail("E_ENUM", path, f"'{path}' must be one of: {allowed}")
    if target is bool:
        if isinstance(value, bool):
            return value
        _fail("E_TYPE", path, f"'{path}' must be a boolean")
    if target is int:
        if isinstance(value, bool):
            _fail("E_TYPE", path, f"'{path}' must be an integer")
        if isinstance(value, int):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                return int(value.strip())
            except ValueError:
                pass
        _fail("E_TYPE", path, f"'{path}' must be an integer")
    if target is float:
        if isinstance(value, bool):
            _fail("E_TYPE", path, f"'{path}' must be a number")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value.strip())
            except ValueError:
                pass
        _fail("E_TYPE", path, f"'{path}' must be a number")
    return value


def _build(cls: Any, payload: dict[str, Any], prefix: str = "") -> Any:
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in payload:
        if key not in known:
            _fail("E_UNKNOWN_KEY", f"{prefix}{key}", f"Unknown config key: {prefix}{key}")
    kwargs = {
        key: _coerce(value, hints[key], f"{prefix}{key}") for key, value in payload.items()
    }
    return cls(**kwargs)


def config_from_dict(payload: dict[str, Any]) -> TrainConfig:
    if not isinstance(payload, dict):
        _fail("E_TYPE", "<root>", "Config document must be a key-value mapping.")
    return validate_config(_build(TrainConfig, payload))


def config_to_dict(cfg: Any) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            out[f.name] = config_to_dict(value)
        elif isinstance(value, Enum):
            out[f.name] = value.value
        else:
            out[f.name] = value
    return out


def load_config_payload(path: str) -> dict[str, Any]:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    text = source.read_text(encoding="utf-8")
    if source.suffix.lower() in {".yaml", ".yml"}:
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigValidationError(
                ConfigIssue(code="E_PARSE", field="<root>", message=f"Invalid YAML in {path}: {exc}")
            ) from exc
    else:
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigValidationError(
                ConfigIssue(code="E_PARSE", field="<root>", message=f"Invalid JSON in {path}: {exc}")
            ) from exc
    if not isinstance(loaded, dict):
        _fail("E_TYPE", "<root>", "Config document must be a key-value mapping.")
    return loaded


def load_config(path: str) -> TrainConfig:
    return config_from_dict(load_config_payload(path))


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        _fail("E_OVERRIDE", item, f"Override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key:
        _fail("E_OVERRIDE", item, "Override key is empty")
    if not raw.strip():
        return key, ""
    try:
        return key, yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigValidationError(
            ConfigIssue(code="E_PARSE", field=key, message=f"Invalid override value for {key!r}: {exc}")
        ) from exc


def apply_overrides(payload: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    merged = json.loads(json.dumps(payload))
    for item in overrides:
        key, value = parse_override(item)
        node = merged
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                _fail("E_OVERRIDE", key, f"'{part}' is not an object")
            node = child
        node[parts[-1]] = value
    return merged


def desk_config(algorithm: Algorithm = Algorithm.SRPO, **changes: Any) -> TrainConfig:
    return validate_config(dataclasses.replace(TrainConfig(algorithm=Algorithm(algorithm)), **changes))


_LARGE_LEARNING_RATES = {
    Algorithm.GRPO: 1e-6,
    Algorithm.SDPO: 1e-5,
    Algorithm.SDPO_FAILED_ONLY: 1e-5,
    Algorithm.SDPO_CORRECT_ONLY: 1e-5,
}


def large_config(algorithm: Algorithm = Algorithm.SRPO, **changes: Any) -> TrainConfig:
    """Large-batch hyperparameters; the model and environment stay desk-scale."""
    algorithm = Algorithm(algorithm)
    cfg = TrainConfig(
        algorithm=algorithm,
        group_size=8,
        question_batch_size=32,
        mini_batch_size=8 if algorithm is Algorithm.GRPO else 32,
        learning_rate=_LARGE_LEARNING_RATES.get(algorithm, 5e-6),
        warmup_steps=10,
        weight_decay=0.01,
        grad_clip_norm=1.0,
        eps_high=0.28,
        is_clip_rho=2.0,
        divergence=Divergence.JS,
        top_k=100,
        ema_rate=0.05,
        dw_beta=1.0,
        mix_lambda=0.9,
        rollout_temperature=1.0,
        eval_temperature=0.6,
        eval_top_p=0.95,
        eval_rollouts=16,
    )
    return validate_config(dataclasses.replace(cfg, **changes))


PRESETS = {"desk": desk_config, "large": large_config}


def resolve_config(
    path: Optional[str],
    overrides: Iterable[str] = (),
    preset: Optional[str] = None,
    algorithm: Optional[str] = None,
    seed: Optional[int] = None,
) -> TrainConfig:
    payload: dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            _fail("E_PRESET", "preset", f"Unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
        payload = config_to_dict(PRESETS[preset](Algorithm(algorithm or Algorithm.SRPO.value)))
    if path:
        payload.update(load_config_payload(path))
    if algorithm is not None:
        payload["algorithm"] = algorithm
    if seed is not None:
        payload["seed"] = seed
    return config_from_dict(apply_overrides(payload, overrides))


def resolve_variant_configs(
    path: Optional[str],
    variants: Iterable[Algorithm],
    overrides: Iterable[str] = (),
    preset: Optional[str] = None,
    seed: Optional[int] = None,
) -> dict[Algorithm, TrainConfig]:
    """One resolved config per variant; a preset contributes that variant's own defaults."""
    overrides = list(overrides)
    configs: dict[Algorithm, TrainConfig] = {}
    for variant in map(Algorithm, variants):
        cfg = resolve_config(path, overrides, preset=preset, algorithm=variant.value, seed=seed)
        if cfg.algorithm != variant:
            _fail("E_OVERRIDE", "algorithm", f"Variant {variant.value} was overridden to {cfg.algorithm.value}")
        configs[variant] = cfg
    return configs


__all__ = [
    "ABLATION_VARIANTS",
    "Algorithm",
    "ConfigIssue",
    "ConfigValidationError",
    "Divergence",
    "EnvKind",
    "EnvSpec",
    "ModelConfig",
    "TrainConfig",
    "WarmstartConfig",
    "apply_overrides",
    "config_from_dict",
    "config_to_dict",
    "desk_config",
    "load_config",
    "large_config",
    "resolve_config",
    "resolve_variant_configs",
    "validate_config",
]
