import contextlib
from typing import Iterator

import numpy as np
import torch

PURPOSES = {
    "task": 0,
    "rollout": 1,
    "teacher": 2,
    "eval": 3,
    "warmstart": 4,
    "probe": 5,
}


def step_rng(seed: int, purpose: str, step: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng((int(seed), PURPOSES[purpose], int(step), int(index)))


@contextlib.contextmanager
def deterministic_torch() -> Iterator[None]:
    previous_threads = torch.get_num_threads()
    previous_flag = torch.are_deterministic_algorithms_enabled()
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous_flag)
        torch.set_num_threads(previous_threads)
