"""Binary checkpoint records.

A checkpoint file is a sequence of records. Each record is a little-endian
uint64 header length, a UTF-8 JSON header (model config, step, seed, role,
vector length) and the flat vector as little-endian float64.
"""
import dataclasses
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch

from core.config import ModelConfig
from mlcore.optim import AdamMoments
from mlcore.policy.model import DTYPE, PolicyParams

logger = logging.getLogger(__name__)

RECORD_ROLES = ("student", "teacher", "adam_exp_avg", "adam_exp_avg_sq")


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CheckpointState:
    student: PolicyParams
    teacher: PolicyParams
    moments: AdamMoments
    step: int
    seed: int


def write_records(path: str, records: list[tuple[dict[str, Any], torch.Tensor]]) -> None:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = target.with_suffix(target.suffix + ".tmp")
    with open(tmp, "wb") as handle:
        for header, vector in records:
            values = vector.detach().to(DTYPE).numpy().astype("<f8")
            payload = dict(header, length=int(values.size))
            raw = json.dumps(payload, sort_keys=True).encode("utf-8")
            handle.write(np.array([len(raw)], dtype="<u8").tobytes())
            handle.write(raw)
            handle.write(values.tobytes())
    os.replace(tmp, target)


def read_records(path: str) -> list[tuple[dict[str, Any], torch.Tensor]]:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    data = source.read_bytes()
    records: list[tuple[dict[str, Any], torch.Tensor]] = []
    pos = 0
    while pos < len(data):
        if pos + 8 > len(data):
            raise CheckpointFormatError(f"{path}: truncated header length at byte {pos}")
        header_len = int(np.frombuffer(data, dtype="<u8", count=1, offset=pos)[0])
        pos += 8
        try:
            header = json.loads(data[pos : pos + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: bad record header at byte {pos}") from exc
        pos += header_len
        length = int(header.get("length", -1))
        if length < 0 or pos + 8 * length > len(data):
            raise CheckpointFormatError(f"{path}: truncated vector for role {header.get('role')}")
        values = np.frombuffer(data, dtype="<f8", count=length, offset=pos).astype(np.float64)
        pos += 8 * length
        records.append((header, torch.from_numpy(values.copy())))
    return records


def save_checkpoint(path: str, state: CheckpointState) -> None:
    base = {
        "model": dataclasses.asdict(state.student.config),
        "step": state.step,
        "seed": state.seed,
        "adam_step": state.moments.step,
    }
    vectors = (
        state.student.flat,
        state.teacher.flat,
        state.moments.exp_avg,
        state.moments.exp_avg_sq,
    )
    write_records(path, [(dict(base, role=role), vec) for role, vec in zip(RECORD_ROLES, vectors)])
    logger.debug("checkpoint step=%d written to %s", state.step, path)


def load_checkpoint(path: str) -> CheckpointState:
    by_role = {header.get("role"): (header, vec) for header, vec in read_records(path)}
    missing = [role for role in RECORD_ROLES if role not in by_role]
    if missing:
        raise CheckpointFormatError(f"{path}: missing records {missing}")
    header = by_role["student"][0]
    try:
        mcfg = ModelConfig(**header["model"])
        step = int(header["step"])
        seed = int(header["seed"])
        adam_step = int(header.get("adam_step", 0))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header: {exc}") from exc
    return CheckpointState(
        student=PolicyParams(mcfg, by_role["student"][1]),
        teacher=PolicyParams(mcfg, by_role["teacher"][1]),
        moments=AdamMoments(by_role["adam_exp_avg"][1], by_role["adam_exp_avg_sq"][1], adam_step),
        step=step,
        seed=seed,
    )
