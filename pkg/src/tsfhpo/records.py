"""Trial lifecycle records shared by the trainer, scheduler, store and analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

COMPLETED = "completed"
FAILED_OOM = "failed_oom"
FAILED_NUMERICAL = "failed_numerical"
PRUNED_UNEXECUTED = "pruned_unexecuted"
STATUSES = (COMPLETED, FAILED_OOM, FAILED_NUMERICAL, PRUNED_UNEXECUTED)

METRIC_FIELDS = ("val_mse", "val_mae", "test_mse", "test_mae")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float

    def to_dict(self) -> dict[str, Any]:
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_loss": self.val_loss, "lr": self.lr}

    @classmethod
    def from_dict(cls, d) -> "EpochRecord":
        return cls(int(d["epoch"]), float(d["train_loss"]), float(d["val_loss"]), float(d["lr"]))


@dataclass(frozen=True)
class TrialRecord:
    trial_id: int
    params: dict[str, Any]
    status: str
    epochs: tuple[EpochRecord, ...] = ()
    val_mse: float | None = None
    val_mae: float | None = None
    test_mse: float | None = None
    test_mae: float | None = None
    wall_ms: int = 0
    mem_bytes: int = 0
    seed: int = 0
    error: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        metrics = [getattr(self, f) for f in METRIC_FIELDS]
        if self.status == COMPLETED:
            if any(m is None or not math.isfinite(m) for m in metrics):
                raise ValueError("completed trials need finite metrics")
        elif any(m is not None for m in metrics):
            raise ValueError(f"{self.status} trials carry no metrics")

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "trial_id": self.trial_id,
            "params": dict(self.params),
            "status": self.status,
            "epochs": [e.to_dict() for e in self.epochs],
        }
        for f in METRIC_FIELDS:
            v = getattr(self, f)
            if v is not None:
                d[f] = v
        d["wall_ms"] = self.wall_ms
        d["mem_bytes"] = self.mem_bytes
        d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d) -> "TrialRecord":
        return cls(
            trial_id=int(d["trial_id"]),
            params=dict(d["params"]),
            status=d["status"],
            epochs=tuple(EpochRecord.from_dict(e) for e in d.get("epochs", ())),
            val_mse=d.get("val_mse"),
            val_mae=d.get("val_mae"),
            test_mse=d.get("test_mse"),
            test_mae=d.get("test_mae"),
            wall_ms=int(d.get("wall_ms", 0)),
            mem_bytes=int(d.get("mem_bytes", 0)),
            seed=int(d.get("seed", 0)),
        )
