import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence

import pandas as pd

from core.env.tasks import is_correct
from core.types import Branch
from mlcore.training.trainer import METRICS_COLUMNS, StepMetrics

logger = logging.getLogger(__name__)

_INT_COLUMNS = ("step", "dropped_token_count")

_ROLLOUT_FIELDS: dict[str, tuple[type, ...]] = {
    "step": (int,),
    "group_id": (int,),
    "rollout_index": (int,),
    "prompt": (list,),
    "response": (list,),
    "reward": (int, float),
    "branch": (str,),
}


class MetricsColumnsError(ValueError):
    def __init__(self, path: str, missing: Sequence[str]):
        self.path = path
        self.missing = list(missing)
        super().__init__(f"{path}: missing metrics columns {self.missing}")


class LogSchemaError(ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.csv"

    @property
    def rollouts(self) -> Path:
        return self.root / "rollouts.jsonl"

    @property
    def log(self) -> Path:
        return self.root / "train.log"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def latest_checkpoint(self) -> Path:
        return self.checkpoints / "latest.ckpt"

    @property
    def base_checkpoint(self) -> Path:
        return self.checkpoints / "base.ckpt"


def metrics_frame(rows: Iterable[StepMetrics]) -> pd.DataFrame:
    return pd.DataFrame([row.to_row() for row in rows], columns=list(METRICS_COLUMNS))


def write_metrics(path: Path, rows: Sequence[StepMetrics]) -> None:
    metrics_frame(rows).to_csv(path, index=False, na_rep="")


def read_metrics(path: Path, required: Sequence[str] = METRICS_COLUMNS) -> pd.DataFrame:
    if not Path(path).exists():
        raise FileNotFoundError(f"Metrics file not found: {path}")
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise MetricsColumnsError(str(path), missing)
    return frame


def metrics_from_frame(frame: pd.DataFrame) -> list[StepMetrics]:
    rows: list[StepMetrics] = []
    for record in frame.to_dict(orient="records"):
        values = {}
        for column in METRICS_COLUMNS:
            value = record[column]
            if column in _INT_COLUMNS:
                values[column] = int(value)
            else:
                values[column] = math.nan if pd.isna(value) else float(value)
        rows.append(StepMetrics(**values))
    return rows


def append_rollouts(path: Path, records: Iterable[dict[str, Any]]) -> None:
    with open(path, "a", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")


def truncate_rollouts(path: Path, before_step: int) -> int:
    """Keep only records with step < before_step; returns the number kept."""
    if not path.exists():
        path.write_text("", encoding="utf-8")
        return 0
    kept = [
        line
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip() and json.loads(line)["step"] < before_step
    ]
    path.write_text("".join(line + "\n" for line in kept), encoding="utf-8")
    return len(kept)


def _check_record(record: Any, line: int) -> dict[str, Any]:
    if not isinstance(record, dict):
        raise LogSchemaError(line, "record must be a JSON object")
    for key, types in _ROLLOUT_FIELDS.items():
        if key not in record:
            raise LogSchemaError(line, f"missing field '{key}'")
        value = record[key]
        if isinstance(value, bool) or not isinstance(value, types):
            raise LogSchemaError(line, f"field '{key}' has wrong type {type(value).__name__}")
    if record["branch"] not in {b.value for b in Branch}:
        raise LogSchemaError(line, f"unknown branch {record['branch']!r}")
    if not 0.0 <= float(record["reward"]) <= 1.0:
        raise LogSchemaError(line, "reward outside [0, 1]")
    teacher_index = record.get("teacher_index")
    if teacher_index is not None and (isinstance(teacher_index, bool) or not isinstance(teacher_index, int)):
        raise LogSchemaError(line, "teacher_index must be an integer or null")
    if teacher_index is not None and teacher_index == record["rollout_index"]:
        raise LogSchemaError(line, "rollout cannot teach itself")
    routed_sdpo = not is_correct(float(record["reward"])) and teacher_index is not None
    if (record["branch"] == Branch.SDPO.value) != routed_sdpo:
        raise LogSchemaError(line, "branch inconsistent with reward and teacher_index")
    return record


def read_rollouts(path: Path) -> list[dict[str, Any]]:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Rollout log not found: {path}")
    records: list[dict[str, Any]] = []
    with open(source, encoding="utf-8") as handle:
        for number, raw in enumerate(handle, start=1):
            if not raw.strip():
                continue
            try:
                payload = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise LogSchemaError(number, f"invalid JSON: {exc.msg}") from exc
            records.append(_check_record(payload, number))
    if not records:
        raise LogSchemaError(0, "rollout log is empty")
    return records
