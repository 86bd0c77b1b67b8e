import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import pandas as pd

from core.config import TrainConfig, config_to_dict

logger = logging.getLogger(__name__)

CODE_VERSION = "srpo-lab 0.1.0"
MANIFEST_FILE = "manifest.json"

# columns that legitimately differ between identical reruns
_VOLATILE_METRICS = ("wall_seconds",)
# nested run manifests embed absolute paths and log checksums
_UNREPRODUCIBLE = {"train.log", MANIFEST_FILE}


@dataclass(frozen=True)
class FileChecksum:
    path: str
    sha256: str
    reproducible: Optional[str]


@dataclass(frozen=True)
class RunManifest:
    config: dict[str, Any]
    code_version: str
    seed: int
    out_dir: str
    files: tuple[FileChecksum, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "code_version": self.code_version,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "files": [
                {"path": f.path, "sha256": f.sha256, "reproducible": f.reproducible}
                for f in self.files
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunManifest":
        try:
            return cls(
                config=dict(data["config"]),
                code_version=str(data["code_version"]),
                seed=int(data["seed"]),
                out_dir=str(data["out_dir"]),
                files=tuple(
                    FileChecksum(str(f["path"]), str(f["sha256"]), f.get("reproducible"))
                    for f in data.get("files", [])
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"Malformed manifest: {exc}") from exc


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def reproducible_checksum(path: Path) -> Optional[str]:
    if path.name in _UNREPRODUCIBLE:
        return None
    if path.name == "metrics.csv":
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
        stable = frame.drop(columns=[c for c in _VOLATILE_METRICS if c in frame.columns])
        buffer = io.StringIO()
        stable.to_csv(buffer, index=False)
        return _sha256(buffer.getvalue().encode("utf-8"))
    return _sha256(path.read_bytes())


def build_manifest(cfg: TrainConfig, out_dir: str) -> RunManifest:
    return collect_manifest(config_to_dict(cfg), cfg.seed, out_dir)


def collect_manifest(config: dict[str, Any], seed: int, out_dir: str) -> RunManifest:
    root = Path(out_dir)
    files: list[FileChecksum] = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path == root / MANIFEST_FILE or path.suffix == ".tmp":
            continue
        files.append(
            FileChecksum(
                path=path.relative_to(root).as_posix(),
                sha256=_sha256(path.read_bytes()),
                reproducible=reproducible_checksum(path),
            )
        )
    return RunManifest(
        config=config,
        code_version=CODE_VERSION,
        seed=seed,
        out_dir=str(root),
        files=tuple(files),
    )


def write_manifest(manifest: RunManifest, path: Path) -> None:
    path.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_manifest(path: str) -> RunManifest:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    try:
        data = json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"Invalid JSON in {path}: {exc}") from exc
    return RunManifest.from_dict(data)


def verify_manifest(manifest: RunManifest, out_dir: str) -> list[str]:
    """Paths whose reproducible checksum does not match (missing files included)."""
    root = Path(out_dir)
    mismatched: list[str] = []
    for entry in manifest.files:
        target = root / entry.path
        if not target.exists():
            mismatched.append(entry.path)
            continue
        if entry.reproducible is None:
            continue
        if reproducible_checksum(target) != entry.reproducible:
            mismatched.append(entry.path)
    return mismatched
