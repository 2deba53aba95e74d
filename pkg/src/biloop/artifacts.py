"""Run-directory layout, artifact manifest, and dependency errors.

Every run directory is self-describing: it contains the exact config snapshot
used plus a manifest of artifact checksums, updated by each command.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class MissingArtifactError(RuntimeError):
    def __init__(self, artifact: str, producer: str):
        super().__init__(
            f"missing artifact '{artifact}'; produce it first with 'biloop {producer}'"
        )
        self.artifact = artifact
        self.producer = producer

    def payload(self) -> dict:
        return {
            "category": "missing-artifact",
            "artifact": self.artifact,
            "producer": self.producer,
            "message": str(self),
        }


class RunPaths:
    """Canonical artifact locations inside one run directory."""

    def __init__(self, run_dir: str | Path):
        self.root = Path(run_dir)

    @property
    def name(self) -> str:
        return self.root.name

    @property
    def config_snapshot(self) -> Path:
        return self.root / "config.snapshot.yaml"

    @property
    def world_dir(self) -> Path:
        return self.root / "world"

    def manifest_path(self, direction: str) -> Path:
        return self.root / f"triplets_{direction}.txt"

    def manifest_meta_path(self, direction: str) -> Path:
        return self.root / f"triplets_{direction}.meta.yaml"

    @property
    def embedding_model(self) -> Path:
        return self.root / "embedding_model.bin"

    @property
    def embed_history(self) -> Path:
        return self.root / "embed_history.csv"

    @property
    def pose_model(self) -> Path:
        return self.root / "pose_model.bin"

    @property
    def pose_history(self) -> Path:
        return self.root / "pose_history.csv"

    @property
    def index_file(self) -> Path:
        return self.root / "index.bin"

    @property
    def loop_log(self) -> Path:
        return self.root / "loop_log.txt"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    def pr_report(self, leg: str) -> Path:
        return self.reports_dir / f"pr_{self.name}_{leg}.csv"

    @property
    def pose_report(self) -> Path:
        return self.reports_dir / f"pose_{self.name}.csv"

    @property
    def summary_report(self) -> Path:
        return self.reports_dir / f"summary_{self.name}.txt"

    @property
    def sweep_table(self) -> Path:
        return self.root / "sweep.csv"

    @property
    def run_manifest(self) -> Path:
        return self.root / "run_manifest.json"

    def require(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(str(path.relative_to(self.root)), producer)
        return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def record_artifacts(paths: RunPaths, produced: list[Path], command: str) -> None:
    """Merge checksums of newly produced files into run_manifest.json."""
    manifest = {"version": 1, "artifacts": {}}
    if paths.run_manifest.exists():
        manifest = json.loads(paths.run_manifest.read_text())
    for path in produced:
        if path.is_dir():
            files = sorted(p for p in path.rglob("*") if p.is_file())
        else:
            files = [path]
        for f in files:
            rel = str(f.relative_to(paths.root))
            manifest["artifacts"][rel] = {"sha256": _sha256(f), "producer": command}
    manifest["artifacts"] = dict(sorted(manifest["artifacts"].items()))
    paths.run_manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
