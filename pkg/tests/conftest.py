"""Shared fixtures: tiny model shapes, a tiny training config and a finite-difference checker."""
import dataclasses
import sys
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from core.config import ModelConfig, TrainConfig, WarmstartConfig, validate_config  # noqa: E402
from core.env.tasks import EnvKind, EnvSpec  # noqa: E402
from mlcore.policy.model import PolicyParams, init_params  # noqa: E402

TINY_MODEL = ModelConfig(
    vocab_size=14,
    context_len=16,
    embed_dim=8,
    num_layers=1,
    num_heads=2,
    mlp_expansion=2,
    init_std=0.02,
)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (enable with --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def tiny_model() -> ModelConfig:
    return TINY_MODEL


@pytest.fixture
def tiny_params() -> PolicyParams:
    """Seed-0 tiny model with weights large enough that distributions are far from uniform."""
    return init_params(dataclasses.replace(TINY_MODEL, init_std=0.5), seed=0)


def tiny_train_config(**changes) -> TrainConfig:
    base = TrainConfig(
        steps=4,
        group_size=4,
        question_batch_size=2,
        mini_batch_size=2,
        learning_rate=1e-2,
        warmup_steps=2,
        max_prompt_len=4,
        max_response_len=4,
        eval_prompts=4,
        eval_rollouts=2,
        eval_interval=2,
        checkpoint_interval=2,
        model=TINY_MODEL,
        env=EnvSpec(kind=EnvKind.COPY_SORT, min_len=2, max_len=3, seed=0),
        warmstart=WarmstartConfig(max_steps=0),
    )
    return validate_config(dataclasses.replace(base, **changes))


@pytest.fixture
def tiny_cfg() -> TrainConfig:
    return tiny_train_config()


FD_STEP = 1e-5
FD_REL_TOL = 1e-4
FD_ABS_FLOOR = 1e-9
FD_GRAD_FLOOR = 1e-8


def finite_difference_check(
    loss_fn: Callable[[PolicyParams], torch.Tensor],
    params: PolicyParams,
    grad: torch.Tensor,
    coords: Optional[np.ndarray] = None,
    h: float = FD_STEP,
) -> list[tuple[int, float, float]]:
    """Central differences on `coords`; returns (index, analytic, numeric) for every failure."""
    if coords is None:
        coords = np.arange(params.num_params)
    failures: list[tuple[int, float, float]] = []
    base = params.flat.detach()
    with torch.no_grad():
        for index in coords:
            bumped = base.clone()
            bumped[index] += h
            up = float(loss_fn(PolicyParams(params.config, bumped)))
            bumped[index] -= 2 * h
            down = float(loss_fn(PolicyParams(params.config, bumped)))
            numeric = (up - down) / (2 * h)
            analytic = float(grad[index])
            if abs(analytic) <= FD_GRAD_FLOOR:
                continue
            if abs(numeric - analytic) > FD_REL_TOL * abs(analytic) + FD_ABS_FLOOR:
                failures.append((int(index), analytic, numeric))
    return failures


@pytest.fixture
def fd_check():
    return finite_difference_check


@pytest.fixture
def fd_coords(tiny_params) -> np.ndarray:
    rng = np.random.default_rng(1234)
    return np.sort(rng.choice(tiny_params.num_params, size=160, replace=False))
