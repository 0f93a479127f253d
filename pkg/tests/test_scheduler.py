import hashlib
import json

import pytest

from tsfhpo import store
from tsfhpo.forecast.data import Dims, IngestionError
from tsfhpo.forecast.memory import MemoryGateFault, estimate_memory
from tsfhpo.forecast.models import HParams, NumericalFault
from tsfhpo.hyperspace import SearchSpace
from tsfhpo.records import COMPLETED, FAILED_NUMERICAL, FAILED_OOM, TrialRecord
from tsfhpo.scheduler import (
    DISPATCH,
    DONE,
    WAIT,
    ConsistencyFault,
    Coordinator,
    ExperimentPlan,
    SchedulerState,
    classify_failure,
    load_plan_data,
    next_action,
    run_experiment,
    trial_seed,
)

WIN = dict(seq_len=12, label_len=6, pred_len=6, clock="simulated")


def plan_for(csv_path, space, **kw):
    return ExperimentPlan(**{"variant": "mixer", "data_path": csv_path, "space": space, **WIN, **kw})


def oom_space():
    return SearchSpace.from_values(
        {"batch_size": [4, 16, 32, 64, 128], "d_model": [16, 32], "d_ff": [16, 32]}
    )


def test_next_action_examples():
    s = SchedulerState(n_trials=20, max_concurrent=4)
    assert next_action(s) == DISPATCH
    s.in_flight = {i: {} for i in range(4)}
    s.next_trial_id = 4
    assert next_action(s) == WAIT
    s = SchedulerState(n_trials=2, max_concurrent=1, next_trial_id=2)
    assert next_action(s) == DONE


def test_trial_seed_stable():
    want = int.from_bytes(hashlib.blake2b(b"7:3", digest_size=8).digest(), "little")
    assert trial_seed(7, 3) == want
    assert trial_seed(7, 3) != trial_seed(7, 4) != trial_seed(8, 3)


def test_classify_failure():
    assert classify_failure(MemoryGateFault(10, 1)) == FAILED_OOM
    assert classify_failure(NumericalFault("nan")) == FAILED_NUMERICAL
    with pytest.raises(OSError):
        classify_failure(OSError("disk"))


def test_twenty_completed(csv_path, small_space):
    result = run_experiment(plan_for(csv_path, small_space, n_trials=20, seed=1))
    assert [r.trial_id for r in result.records] == list(range(20))
    assert result.totals[COMPLETED] == 20
    best = min(result.records, key=lambda r: r.val_mse)
    assert result.best_trial_id == best.trial_id


def test_two_of_twenty_over_gate(csv_path):
    space = oom_space()
    dims = Dims(12, 6, 3, 3)
    mems = sorted(estimate_memory("mixer", HParams.from_config(c), dims) for c in space.configs())
    assert mems[17] < mems[18]
    plan = plan_for(csv_path, space, searcher="grid", n_trials=20, mem_budget=mems[17], fixed_params={"train_epochs": 1})
    result = run_experiment(plan)
    assert result.totals == {COMPLETED: 18, FAILED_OOM: 2, FAILED_NUMERICAL: 0}
    assert result.oom_rate == 0.1


def test_grid_exhaustion_stops_cleanly(csv_path):
    space = SearchSpace.from_values({"d_layers": [1, 2], "e_layers": [1, 2, 3]})
    result = run_experiment(plan_for(csv_path, space, searcher="grid", n_trials=20, fixed_params={"train_epochs": 1, "d_model": 16, "d_ff": 16}))
    assert len(result.records) == 6


def test_data_errors_abort_before_trials(tmp_path, small_space):
    bad = tmp_path / "bad.csv"
    bad.write_text("when,OT\n1,2\n2,3\n")
    with pytest.raises(IngestionError):
        run_experiment(plan_for(bad, small_space), tmp_path / "exp")
    assert not (tmp_path / "exp").exists()


def test_commit_semantics(csv_path, small_space):
    plan = plan_for(csv_path, small_space, n_trials=10)
    coord = Coordinator(plan, load_plan_data(plan))
    tid, cfg = coord.suggest()
    rec = coord.execute(tid, cfg)
    coord.commit(rec)
    assert len(coord.searcher.history) == 1
    with pytest.raises(ConsistencyFault):
        coord.commit(rec)
    with pytest.raises(ConsistencyFault):
        coord.commit(TrialRecord(99, cfg, FAILED_OOM))


def test_failed_commit_leaves_densities(csv_path, small_space):
    plan = plan_for(csv_path, small_space, n_trials=10, mem_budget=1)
    coord = Coordinator(plan, load_plan_data(plan))
    coord.run(stop_after=2)
    before = coord.state.committed[:]
    assert all(r.status == FAILED_OOM for r in before)
    tid, cfg = coord.suggest()
    coord.commit(TrialRecord(tid, cfg, FAILED_OOM))
    assert len(coord.searcher.history) == 3
    assert not coord.searcher.completed


def test_repeat_oom_config_fails_fast(csv_path, small_space):
    plan = plan_for(csv_path, small_space, n_trials=4)
    coord = Coordinator(plan, load_plan_data(plan))
    tid, cfg = coord.suggest()
    coord.commit(TrialRecord(tid, cfg, FAILED_OOM))
    coord.state.in_flight[1] = cfg
    rec = coord.execute(1, cfg)
    assert rec.status == FAILED_OOM and rec.epochs == ()


def synchronous_schedule(plan):
    """Same dispatch/commit order as the pool, but every trial runs inline."""
    coord = Coordinator(plan, load_plan_data(plan))
    pending = {}
    while True:
        action = coord.state.next_action()
        if action == DISPATCH:
            got = coord.suggest()
            if got is None:
                continue
            pending[got[0]] = coord.execute(*got)
        elif action == WAIT:
            coord.commit(pending.pop(min(pending)))
        else:
            return coord.state.committed


@pytest.mark.parametrize("workers", [2, 3])
def test_concurrent_matches_its_dispatch_schedule(csv_path, small_space, workers):
    plan = plan_for(csv_path, small_space, n_trials=8, seed=4, max_concurrent=workers)
    par = run_experiment(plan)
    assert par.records == run_experiment(plan).records
    assert par.records == synchronous_schedule(plan)


def test_sequential_runs_bit_identical(csv_path, small_space, tmp_path):
    plan = plan_for(csv_path, small_space, n_trials=6, seed=9)
    run_experiment(plan, tmp_path / "a")
    run_experiment(plan, tmp_path / "b")
    a = (tmp_path / "a" / store.TRIALS).read_bytes()
    assert a == (tmp_path / "b" / store.TRIALS).read_bytes()
    assert len(a.splitlines()) == 6


def test_store_failure_reports_last_durable(csv_path, small_space, tmp_path, monkeypatch):
    plan = plan_for(csv_path, small_space, n_trials=6)
    calls = []
    real = store.append_record

    def flaky(path, record):
        if len(calls) == 3:
            raise OSError("disk full")
        calls.append(record.trial_id)
        real(path, record)

    monkeypatch.setattr(store, "append_record", flaky)
    with pytest.raises(store.StoreError) as e:
        run_experiment(plan, tmp_path / "exp")
    assert e.value.last_durable_trial == 2


def test_plan_digest_and_roundtrip(csv_path, small_space):
    plan = plan_for(csv_path, small_space, searcher_knobs={"n_startup": 3})
    again = ExperimentPlan.from_dict(json.loads(json.dumps(plan.to_dict())), small_space)
    assert again == plan and again.digest() == plan.digest()
    assert plan_for(csv_path, small_space, seed=1).digest() != plan.digest()


def test_plan_rejects_bad_values(csv_path, small_space):
    for bad in ({"n_trials": 0}, {"max_concurrent": 0}, {"mem_budget": 0}, {"variant": "tcn"}, {"searcher": "x"}):
        with pytest.raises(ValueError):
            plan_for(csv_path, small_space, **bad)
