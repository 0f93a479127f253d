"""Append-only experiment store: ``manifest.json`` plus ``trials.jsonl``.

One JSON object per line, written in commit order and flushed before the
append returns. Floats go through ``json`` (shortest round-trip repr), so
reloading a record reproduces every metric bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .records import TrialRecord

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
TRIALS = "trials.jsonl"
REPORT_DIR = "report"


class StoreError(OSError):
    """Reading or writing the experiment store failed."""

    def __init__(self, message: str, last_durable_trial: int | None = None):
        self.last_durable_trial = last_durable_trial
        super().__init__(message)


class LoadError(ValueError):
    pass


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def record_line(record: TrialRecord) -> str:
    return json.dumps(record.to_dict(), separators=(",", ":"), allow_nan=False) + "\n"


def write_manifest(exp_dir, manifest: dict[str, Any]) -> Path:
    exp_dir = Path(exp_dir)
    exp_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"artifact_version": __version__, "created": datetime.now(timezone.utc).isoformat(), **manifest}
    path = exp_dir / MANIFEST
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    (exp_dir / TRIALS).touch()
    return path


def append_record(store_path, record: TrialRecord) -> None:
    """Append one line and fsync it; this is the scheduler's durability point."""
    store_path = Path(store_path)
    if store_path.is_dir():
        store_path = store_path / TRIALS
    if not (store_path.parent / MANIFEST).exists():
        raise StoreError(f"no manifest next to {store_path}")
    with open(store_path, "a") as fh:
        fh.write(record_line(record))
        fh.flush()
        os.fsync(fh.fileno())


@dataclass
class LoadedExperiment:
    manifest: dict[str, Any]
    records: list[TrialRecord]
    dropped_lines: int = 0

    def __iter__(self):
        # Allows ``manifest, records = load_experiment(d)``.
        return iter((self.manifest, self.records))


def read_manifest(exp_dir) -> dict[str, Any]:
    path = Path(exp_dir) / MANIFEST
    if not path.exists():
        raise LoadError(f"missing {path}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"corrupt manifest {path}: {exc}") from None
    if not isinstance(manifest, dict) or "plan" not in manifest:
        raise LoadError(f"corrupt manifest {path}: no plan")
    return manifest


def load_experiment(exp_dir) -> LoadedExperiment:
    """Read manifest and records; a torn final line is dropped and counted."""
    exp_dir = Path(exp_dir)
    manifest = read_manifest(exp_dir)
    path = exp_dir / TRIALS
    text = path.read_text() if path.exists() else ""
    lines = text.split("\n")
    torn_tail = lines[-1] != ""
    lines = [ln for ln in lines if ln.strip()]
    records: list[TrialRecord] = []
    dropped = 0
    for i, line in enumerate(lines):
        try:
            records.append(TrialRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            if i == len(lines) - 1 and torn_tail:
                dropped += 1
                log.warning("dropping truncated final line of %s", path)
                break
            raise LoadError(f"{path}: line {i + 1} is corrupt: {exc}") from None
    return LoadedExperiment(manifest, records, dropped)
