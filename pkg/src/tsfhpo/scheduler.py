"""Experiment orchestration: suggest, dispatch, collect, commit.

A single coordinator owns the plan, the searcher and the store. Trials run
in a thread pool of ``max_concurrent`` workers and are committed strictly
in dispatch order, so the record sequence only depends on the plan.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .forecast.data import ForecastData, load_csv_dataset, prepare_data
from .forecast.memory import MemoryGateFault
from .forecast.models import IGNORED_PARAMS, VARIANTS, HParams, NumericalFault
from .forecast.training import CLOCKS, train_trial
from .hyperspace import SearchSpace, validate_config
from .records import (
    COMPLETED,
    FAILED_NUMERICAL,
    FAILED_OOM,
    TrialRecord,
)
from .searchers import FAILED, SEARCHER_KINDS, GridExhausted, Observation, Searcher, make_searcher
from . import store

log = logging.getLogger(__name__)

DISPATCH = "dispatch"
WAIT = "wait"
DONE = "done"


class ConsistencyFault(RuntimeError):
    """Scheduler bookkeeping was violated; indicates a bug, not a user error."""


class ResumeError(ValueError):
    pass


def trial_seed(master_seed: int, trial_id: int) -> int:
    """Stable 64-bit seed for one trial, independent of platform and run."""
    digest = hashlib.blake2b(f"{master_seed}:{trial_id}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def suggestion_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0]))


def classify_failure(fault: BaseException) -> str:
    if isinstance(fault, MemoryGateFault):
        return FAILED_OOM
    if isinstance(fault, NumericalFault):
        return FAILED_NUMERICAL
    raise fault


@dataclass
class ExperimentPlan:
    variant: str
    data_path: str
    space: SearchSpace = field(default_factory=SearchSpace.builtin)
    searcher: str = "tpe"
    searcher_knobs: dict[str, Any] = field(default_factory=dict)
    n_trials: int = 20
    max_concurrent: int = 1
    mem_budget: int = 1 << 30
    seed: int = 0
    seq_len: int = 96
    label_len: int = 48
    pred_len: int = 96
    features: str = "M"
    target: str = "OT"
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    patience: int = 3
    fixed_params: dict[str, Any] = field(default_factory=dict)
    clock: str = "wall"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        if self.searcher not in SEARCHER_KINDS:
            raise ValueError(f"unknown searcher {self.searcher!r}; expected one of {SEARCHER_KINDS}")
        if self.n_trials < 1 or self.max_concurrent < 1:
            raise ValueError("n_trials and max_concurrent must be >= 1")
        if self.mem_budget <= 0:
            raise ValueError("mem_budget must be positive")
        if self.clock not in CLOCKS:
            raise ValueError(f"clock must be one of {CLOCKS}")
        self.ratios = tuple(self.ratios)
        self.data_path = str(self.data_path)

    @property
    def dataset_name(self) -> str:
        return Path(self.data_path).stem

    def to_dict(self) -> dict[str, Any]:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "space"}
        d["ratios"] = list(self.ratios)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], space: SearchSpace) -> "ExperimentPlan":
        return cls(space=space, **dict(d))

    def digest(self) -> str:
        blob = json.dumps({"plan": self.to_dict(), "space": self.space.to_text()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def hparams(self, config: Mapping[str, Any]) -> HParams:
        return HParams.from_config({**config, **self.fixed_params}, patience=self.patience)

    def make_searcher(self) -> Searcher:
        return make_searcher(self.searcher, self.space, **self.searcher_knobs)


@dataclass
class ExperimentResult:
    plan_digest: str
    variant: str
    dataset: str
    records: list[TrialRecord]

    @property
    def best_trial_id(self) -> int | None:
        done = [r for r in self.records if r.completed]
        if not done:
            return None
        return min(done, key=lambda r: (r.val_mse, r.trial_id)).trial_id

    @property
    def best(self) -> TrialRecord | None:
        tid = self.best_trial_id
        return None if tid is None else next(r for r in self.records if r.trial_id == tid)

    @property
    def totals(self) -> dict[str, int]:
        t = {COMPLETED: 0, FAILED_OOM: 0, FAILED_NUMERICAL: 0}
        for r in self.records:
            t[r.status] = t.get(r.status, 0) + 1
        return t

    @property
    def oom_rate(self) -> float:
        return self.totals[FAILED_OOM] / len(self.records) if self.records else 0.0


@dataclass
class SchedulerState:
    n_trials: int
    max_concurrent: int
    next_trial_id: int = 0
    in_flight: dict[int, dict[str, Any]] = field(default_factory=dict)
    committed: list[TrialRecord] = field(default_factory=list)
    exhausted: bool = False

    def next_action(self) -> str:
        if not self.exhausted and self.next_trial_id < self.n_trials and len(self.in_flight) < self.max_concurrent:
            return DISPATCH
        if self.in_flight:
            return WAIT
        return DONE


def next_action(state: SchedulerState) -> str:
    return state.next_action()


def _observation(record: TrialRecord) -> Observation:
    if record.completed:
        return Observation(record.params, record.val_mse)
    return Observation(record.params, None, FAILED)


class Coordinator:
    """Owns one experiment's state; every commit passes through here."""

    def __init__(
        self,
        plan: ExperimentPlan,
        data: ForecastData,
        exp_dir=None,
        done: Sequence[TrialRecord] = (),
    ):
        self.plan = plan
        self.data = data
        self.store_path = Path(exp_dir) / store.TRIALS if exp_dir is not None else None
        self.searcher = plan.make_searcher()
        self.state = SchedulerState(plan.n_trials, plan.max_concurrent)
        self._oom_configs: list[dict[str, Any]] = []
        for rec in done:
            self._replay(rec)

    def _replay(self, record: TrialRecord) -> None:
        if record.trial_id != self.state.next_trial_id:
            raise ResumeError(f"stored trial ids are not dense: expected {self.state.next_trial_id}, got {record.trial_id}")
        violations = validate_config(self.plan.space, record.params)
        if violations:
            raise ResumeError(f"trial {record.trial_id} does not fit the plan's space: {violations}")
        self.state.next_trial_id += 1
        self.state.committed.append(record)
        self.searcher.observe(_observation(record))
        if record.status == FAILED_OOM:
            self._oom_configs.append(dict(record.params))

    def suggest(self) -> tuple[int, dict[str, Any]] | None:
        tid = self.state.next_trial_id
        seed = trial_seed(self.plan.seed, tid)
        try:
            config = self.searcher.suggest(suggestion_rng(seed))
        except GridExhausted:
            self.state.exhausted = True
            return None
        self.state.next_trial_id += 1
        self.state.in_flight[tid] = config
        return tid, config

    def execute(self, trial_id: int, config: Mapping[str, Any]) -> TrialRecord:
        seed = trial_seed(self.plan.seed, trial_id)
        hp = self.plan.hparams(config)
        if dict(config) in self._oom_configs:
            # The gate is deterministic: a repeat of an OOM config fails without work.
            return train_trial(self.plan.variant, hp, self.data, 0, seed, trial_id, config, self.plan.clock)
        return train_trial(self.plan.variant, hp, self.data, self.plan.mem_budget, seed, trial_id, config, self.plan.clock)

    def commit(self, record: TrialRecord) -> None:
        if record.trial_id not in self.state.in_flight:
            raise ConsistencyFault(f"trial {record.trial_id} is not in flight")
        if self.store_path is not None:
            try:
                store.append_record(self.store_path, record)
            except OSError as exc:
                last = self.state.committed[-1].trial_id if self.state.committed else None
                raise store.StoreError(f"could not append trial {record.trial_id}: {exc}", last) from exc
        del self.state.in_flight[record.trial_id]
        self.state.committed.append(record)
        self.searcher.observe(_observation(record))
        if record.status == FAILED_OOM:
            self._oom_configs.append(dict(record.params))
        log.info(
            "trial %d %s val_mse=%s",
            record.trial_id,
            record.status,
            f"{record.val_mse:.4f}" if record.val_mse is not None else "-",
        )

    def run(self, stop_after: int | None = None) -> list[TrialRecord]:
        """Drive the loop to completion, or until ``stop_after`` new commits."""
        new = 0
        pending: dict[int, Future] = {}
        pool = ThreadPoolExecutor(self.plan.max_concurrent) if self.plan.max_concurrent > 1 else None
        try:
            while stop_after is None or new < stop_after:
                action = self.state.next_action()
                if action == DISPATCH:
                    if stop_after is not None and new + len(self.state.in_flight) >= stop_after:
                        action = WAIT if self.state.in_flight else DONE
                    else:
                        got = self.suggest()
                        if got is None:
                            continue
                        tid, config = got
                        if pool is None:
                            self.commit(self.execute(tid, config))
                            new += 1
                        else:
                            pending[tid] = pool.submit(self.execute, tid, config)
                        continue
                if action == WAIT:
                    oldest = min(pending)
                    self.commit(pending.pop(oldest).result())
                    new += 1
                elif action == DONE:
                    break
        finally:
            if pool is not None:
                for fut in pending.values():
                    fut.cancel()
                pool.shutdown(wait=True)
        return self.state.committed

    def result(self) -> ExperimentResult:
        return ExperimentResult(self.plan.digest(), self.plan.variant, self.plan.dataset_name, list(self.state.committed))


def load_plan_data(plan: ExperimentPlan) -> ForecastData:
    dataset = load_csv_dataset(plan.data_path, plan.features, plan.target)
    return prepare_data(dataset, plan.seq_len, plan.label_len, plan.pred_len, plan.ratios)


def manifest_for(plan: ExperimentPlan) -> dict[str, Any]:
    return {
        "plan": plan.to_dict(),
        "space": plan.space.to_text(),
        "plan_digest": plan.digest(),
        "dataset_digest": store.file_digest(plan.data_path),
        "ignored_params": list(IGNORED_PARAMS[plan.variant]),
    }


def run_experiment(
    plan: ExperimentPlan,
    exp_dir=None,
    stop_after: int | None = None,
    data: ForecastData | None = None,
) -> ExperimentResult:
    """Run every budgeted trial of ``plan``; persist to ``exp_dir`` when given.

    Dataset and split errors surface before any trial runs.
    ``stop_after`` ends the run early after that many commits (used to
    simulate interruption).
    """
    if data is None:
        data = load_plan_data(plan)
    if exp_dir is not None:
        store.write_manifest(exp_dir, manifest_for(plan))
    coord = Coordinator(plan, data, exp_dir)
    coord.run(stop_after)
    return coord.result()


@dataclass
class ResumeState:
    plan: ExperimentPlan
    done: list[TrialRecord]
    exp_dir: Path

    @property
    def remaining(self) -> int:
        return max(0, self.plan.n_trials - len(self.done))


def resume(exp_dir) -> ResumeState:
    """Load a stored experiment and check it can be continued as planned."""
    exp_dir = Path(exp_dir)
    loaded = store.load_experiment(exp_dir)
    man = loaded.manifest
    plan = ExperimentPlan.from_dict(man["plan"], SearchSpace.from_text(man["space"]))
    if man.get("plan_digest") != plan.digest():
        raise ResumeError("manifest plan digest does not match its plan")
    if not Path(plan.data_path).exists():
        raise ResumeError(f"dataset {plan.data_path} is missing")
    if store.file_digest(plan.data_path) != man.get("dataset_digest"):
        raise ResumeError(f"dataset {plan.data_path} changed since the experiment started")
    if len(loaded.records) > plan.n_trials:
        raise ResumeError(f"{len(loaded.records)} stored trials exceed the plan's {plan.n_trials}")
    for i, rec in enumerate(loaded.records):
        if rec.trial_id != i:
            raise ResumeError(f"stored trial ids are not dense at line {i + 1}")
        if validate_config(plan.space, rec.params):
            raise ResumeError(f"trial {i} does not fit the plan's space")
    if loaded.dropped_lines:
        # Rewrite without the torn tail so new appends start on a clean line.
        with open(exp_dir / store.TRIALS, "w") as fh:
            fh.writelines(store.record_line(r) for r in loaded.records)
    return ResumeState(plan, loaded.records, exp_dir)


def continue_experiment(state: ResumeState, stop_after: int | None = None, data: ForecastData | None = None) -> ExperimentResult:
    plan = state.plan
    if data is None:
        data = load_plan_data(plan)
    coord = Coordinator(plan, data, state.exp_dir, state.done)
    if state.remaining:
        coord.run(stop_after)
    return coord.result()


def result_from_store(exp_dir) -> ExperimentResult:
    loaded = store.load_experiment(exp_dir)
    plan = loaded.manifest["plan"]
    return ExperimentResult(
        loaded.manifest.get("plan_digest", ""),
        plan["variant"],
        Path(plan["data_path"]).stem,
        loaded.records,
    )
