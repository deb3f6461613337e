"""Artifact-directory plumbing: manifests and the single-writer lock."""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

from .config import RunConfig, config_hash
from .errors import ConfigurationError
from .pipeline import file_sha256

LOCK_NAME = ".lock"


@contextmanager
def output_lock(out_dir: str | Path):
    """Exclusive-creation lock file; concurrent writers to one dir are refused."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock_path = out_dir / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigurationError(
            f"output dir {out_dir} is locked by another command (stale? remove {lock_path})"
        )
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock_path.unlink(missing_ok=True)


def write_manifest(
    out_dir: str | Path,
    command: str,
    cfg: RunConfig,
    inputs: dict[str, str | Path] | None = None,
    outputs: list[str] | None = None,
    seeds: dict[str, int] | None = None,
):
    """Manifest with content hashes of every input artifact, sufficient to
    re-run the producing command bit-identically."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "inputs": {
            name: {"path": str(path), "sha256": file_sha256(path)}
            for name, path in (inputs or {}).items()
        },
        "outputs": sorted(outputs or []),
        "seeds": seeds or {"seed": cfg.seed, "data_seed": cfg.data_seed, "eval_seed": cfg.eval_seed},
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest
