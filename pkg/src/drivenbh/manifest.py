"""Run manifests and deterministic result files.

Every CLI command writes a ``manifest.json`` next to its outputs: the config
snapshot, code version, effective seed, timestamps and a sha256 per output
file, so any result can be traced to the exact inputs and re-verified. CSV
numeric content is written with shortest round-trip float formatting and is
byte-identical across re-runs with the same seed and config.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from . import __version__

__all__ = ["RunManifest", "write_csv", "fmt"]


def fmt(x) -> str:
    """Deterministic, shortest round-trip cell formatting."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return "nan"
        return repr(float(x))
    return str(x)


def write_csv(path: Path, header: list[str], rows) -> Path:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(c) for c in row))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n")
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


class RunManifest:
    """Collects outputs of one command run and writes manifest.json."""

    def __init__(self, command: str, config_snapshot: dict, seed: int):
        self.command = command
        self.config_snapshot = config_snapshot
        self.seed = seed
        self.started_at = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.outputs: dict[str, str] = {}
        self.extra: dict = {}

    def add(self, path: Path) -> Path:
        path = Path(path)
        self.outputs[path.name] = _sha256(path)
        return path

    def write(self, out_dir: Path) -> Path:
        doc = {
            "command": self.command,
            "code_version": __version__,
            "seed": self.seed,
            "config": {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.config_snapshot.items()
                if not isinstance(v, dict)
            },
            "started_at": self.started_at,
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "outputs": self.outputs,
            "extra": self.extra,
        }
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
        return path
