"""Trial training loop: Adam, halving lr schedule, early stopping, metrics."""

from __future__ import annotations

import math
import time
from typing import Any, Mapping

import numpy as np

from ..records import COMPLETED, FAILED_NUMERICAL, FAILED_OOM, EpochRecord, TrialRecord
from .data import ForecastData, Normalizer, WindowSet
from .memory import estimate_memory
from .models import HParams, Model, NumericalFault, build_model, forward_macs

CLOCKS = ("wall", "simulated")
EVAL_BATCH = 256


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def lr_at_epoch(learning_rate: float, epoch: int) -> float:
    """Halve the rate every epoch; ``epoch`` is 1-based."""
    return learning_rate * 0.5 ** (epoch - 1)


class EarlyStopping:
    """Stop once validation loss fails to improve ``patience`` epochs in a row."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.counter = 0
        self.epoch = 0

    def step(self, val_loss: float) -> bool:
        """Record one epoch; return True when this epoch is a new best."""
        self.epoch += 1
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = self.epoch
            self.counter = 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


def evaluate(model: Model, windows: WindowSet, normalizer: Normalizer | None = None) -> tuple[float, float]:
    """MSE and MAE over every element of every window, on the normalized scale."""
    n = len(windows)
    if n == 0:
        raise ValueError("cannot evaluate on an empty window set")
    sq = ab = 0.0
    count = 0
    for lo in range(0, n, EVAL_BATCH):
        x, y = windows.batch(slice(lo, lo + EVAL_BATCH))
        err = model.forward(x) - y
        sq += float(np.sum(err * err))
        ab += float(np.sum(np.abs(err)))
        count += err.size
    return sq / count, ab / count


def train_trial(
    variant: str,
    hparams: HParams,
    data: ForecastData,
    budget_bytes: int,
    seed: int,
    trial_id: int = 0,
    params: Mapping[str, Any] | None = None,
    clock: str = "wall",
) -> TrialRecord:
    """Run one trial end to end and return its record.

    Configurations whose memory estimate exceeds ``budget_bytes`` fail
    before any training. A non-finite loss ends the trial as a numerical
    failure. Test metrics use the parameters of the best validation epoch.
    """
    if budget_bytes < 0:
        raise ValueError("budget_bytes must be non-negative")
    if clock not in CLOCKS:
        raise ValueError(f"clock must be one of {CLOCKS}")
    params = dict(params) if params is not None else {}
    mem = estimate_memory(variant, hparams, data.dims)
    base = dict(trial_id=trial_id, params=params, mem_bytes=mem, seed=seed)
    if mem > budget_bytes:
        return TrialRecord(status=FAILED_OOM, error=f"estimate {mem} > budget {budget_bytes}", **base)

    start = time.perf_counter()
    init_seed = int(np.random.SeedSequence([seed, 2]).generate_state(1)[0])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    model = build_model(variant, hparams, data.dims, init_seed)
    opt = Adam(model.params)
    stopper = EarlyStopping(hparams.patience)
    epochs: list[EpochRecord] = []
    best_params = None
    n_train = len(data.train)
    macs = forward_macs(variant, hparams, data.dims)
    work = 0
    try:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for epoch in range(1, hparams.train_epochs + 1):
                lr = lr_at_epoch(hparams.learning_rate, epoch)
                order = rng.permutation(n_train)
                losses = []
                for k, lo in enumerate(range(0, n_train, hparams.batch_size)):
                    idx = order[lo : lo + hparams.batch_size]
                    x, y = data.train.batch(idx)
                    loss, grads = model.loss_and_grads(x, y, train_mode=True, rng=rng, batch_index=k)
                    opt.step(model.params, grads, lr)
                    losses.append(loss)
                val_loss, _ = evaluate(model, data.val)
                work += 3 * n_train + len(data.val)
                if not math.isfinite(val_loss):
                    raise NumericalFault(f"non-finite validation loss in epoch {epoch}")
                epochs.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, lr))
                if stopper.step(val_loss):
                    best_params = {k: v.copy() for k, v in model.params.items()}
                if stopper.should_stop:
                    break
            model.params = best_params
            val_mse, val_mae = evaluate(model, data.val)
            test_mse, test_mae = evaluate(model, data.test)
            work += len(data.val) + len(data.test)
            if not all(math.isfinite(v) for v in (val_mse, val_mae, test_mse, test_mae)):
                raise NumericalFault("non-finite evaluation metric")
    except NumericalFault as exc:
        return TrialRecord(
            status=FAILED_NUMERICAL,
            epochs=tuple(epochs),
            wall_ms=_elapsed(clock, start, work * macs),
            error=str(exc),
            **base,
        )
    return TrialRecord(
        status=COMPLETED,
        epochs=tuple(epochs),
        val_mse=val_mse,
        val_mae=val_mae,
        test_mse=test_mse,
        test_mae=test_mae,
        wall_ms=_elapsed(clock, start, work * macs),
        **base,
    )


def _elapsed(clock: str, start: float, macs: int) -> int:
    if clock == "wall":
        return int(round((time.perf_counter() - start) * 1000))
    # Nominal throughput of one multiply-accumulate per nanosecond.
    return int(round(macs / 1e6))
