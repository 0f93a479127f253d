"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s -v``.
"""

import json
import time
import warnings

import numpy as np
import pytest

from oracles import last_value_mse, max_rel_grad_error, windows_brute_force
from test_hyperspace import EXPECTED_SPACES
from test_searchers import _oracle_case, oracle_argmax
from tsfhpo import cli, store
from tsfhpo.analysis import CONVERGED, OVERFIT, UNDERFIT, diagnose_curve, oom_boundary, oom_boundary_markdown, oom_table
from tsfhpo.forecast.data import Dims, gen_synthetic, make_windows, prepare_data
from tsfhpo.forecast.memory import estimate_memory
from tsfhpo.forecast.models import VARIANTS, HParams, build_model
from tsfhpo.forecast.training import evaluate, train_trial
from tsfhpo.hyperspace import OBSERVED_RANGES, SearchSpace, builtin_ladders, derive_domain
from tsfhpo.records import EpochRecord
from tsfhpo.scheduler import ExperimentPlan, continue_experiment, resume, run_experiment, suggestion_rng, trial_seed
from tsfhpo.searchers import Observation, TPESearcher, make_searcher


def verdict(capsys, n, ok, detail, seconds, limit):
    ok = bool(ok) and seconds < limit
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail}; {seconds:.1f}s, limit {limit:g}s)")
    return ok


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_criterion_01_search_space(capsys):
    with Timer() as t:
        got = {}
        for ladder in builtin_ladders():
            lo, hi = OBSERVED_RANGES[ladder.name]
            got[ladder.name] = derive_domain(ladder, lo, hi).format()
    same = sum(got[k] == v for k, v in EXPECTED_SPACES.items())
    assert verdict(capsys, 1, same == 9, f"{same}/9 rows string-equal", t.seconds, 1)


def test_criterion_02_tpe_oracle(capsys):
    with Timer() as t:
        mismatches = 0
        for seed in range(100):
            space, hist = _oracle_case(seed)
            tpe = TPESearcher(space, n_startup=0, exhaustive=True)
            for o in hist:
                tpe.observe(o)
            want = oracle_argmax(space, hist, tpe.gamma_fraction, tpe.prior_weight)
            mismatches += tpe._propose(np.random.default_rng(seed)) != want
    assert verdict(capsys, 2, mismatches == 0, f"{mismatches} mismatches in 100 cases", t.seconds, 10)


def ordinal_distance_loss(space, cfg):
    """Zero only at d_model=256 with learning_rate=0.001; ordinal distance elsewhere."""
    dm, lr = space["d_model"], space["learning_rate"]
    return float(abs(dm.ordinal(cfg["d_model"]) - dm.ordinal(256)) + abs(lr.ordinal(cfg["learning_rate"]) - lr.ordinal(0.001)))


def best_found(kind, space, seed, n_trials=20):
    searcher = make_searcher(kind, space)
    best = np.inf
    for tid in range(n_trials):
        cfg = searcher.suggest(suggestion_rng(trial_seed(seed, tid)))
        loss = ordinal_distance_loss(space, cfg)
        searcher.observe(Observation(cfg, loss))
        best = min(best, loss)
    return best


def test_criterion_03_tpe_beats_random(capsys):
    space = SearchSpace.builtin()
    with Timer() as t:
        tpe = np.array([best_found("tpe", space, s) for s in range(100)])
        rnd = np.array([best_found("random", space, s) for s in range(100)])
    hit = float(np.mean(tpe == 0))
    detail = (
        f"mean best tpe {tpe.mean():.2f} vs random {rnd.mean():.2f}; "
        f"optimum hit rate tpe {hit:.0%}, random {np.mean(rnd == 0):.0%}"
    )
    assert verdict(capsys, 3, tpe.mean() <= rnd.mean() and hit >= 0.6, detail, t.seconds, 60)


def test_criterion_04_gradients(capsys):
    with Timer() as t:
        errors = {v: max(max_rel_grad_error(v, seed) for seed in range(3)) for v in VARIANTS}
    worst = max(errors.values())
    detail = ", ".join(f"{v} {e:.1e}" for v, e in errors.items())
    assert verdict(capsys, 4, worst <= 1e-4, f"max relative error {detail}", t.seconds, 30)


def test_criterion_05_trainability(capsys):
    with Timer() as t:
        data = prepare_data(gen_synthetic(7, 2000, 24, 0.0, seed=1), 96, 48, 96)
        lin = HParams(batch_size=32, learning_rate=1e-3, train_epochs=10)
        init_seed = int(np.random.SeedSequence([5, 2]).generate_state(1)[0])
        initial, _ = evaluate(build_model("linear", lin, data.dims, init_seed), data.train)
        r = train_trial("linear", lin, data, 1 << 30, seed=5)
        ratio = initial / r.epochs[-1].train_loss
        att = HParams(d_model=64, d_ff=128, n_heads=4, e_layers=1, d_layers=1, factor=4,
                      batch_size=32, learning_rate=1e-3, train_epochs=10)
        a = train_trial("attention_lite", att, data, 1 << 30, seed=5)
        baseline = last_value_mse(data.val)
    ok = len(r.epochs) <= 10 and ratio >= 10 and a.status == "completed" and a.val_mse < baseline
    detail = (
        f"linear train MSE {initial:.4f} -> {r.epochs[-1].train_loss:.4f} ({ratio:.0f}x) in {len(r.epochs)} epochs; "
        f"attention_lite val {a.val_mse:.4f} vs last-value {baseline:.4f}"
    )
    assert verdict(capsys, 5, ok, detail, t.seconds, 120)


def test_criterion_06_determinism_and_resume(capsys, csv_path, small_space, tmp_path):
    plan = ExperimentPlan(variant="mixer", data_path=str(csv_path), space=small_space, n_trials=20, seed=11,
                          seq_len=12, label_len=6, pred_len=6, clock="simulated")
    with Timer() as t:
        run_experiment(plan, tmp_path / "full")
        run_experiment(plan, tmp_path / "again")
        full = (tmp_path / "full" / store.TRIALS).read_bytes()
        same = full == (tmp_path / "again" / store.TRIALS).read_bytes()
        resumed = {}
        for k in (1, 7, 19):
            d = tmp_path / f"cut{k}"
            run_experiment(plan, d, stop_after=k)
            assert len((d / store.TRIALS).read_text().splitlines()) == k
            continue_experiment(resume(d))
            resumed[k] = (d / store.TRIALS).read_bytes() == full
    ok = same and all(resumed.values())
    detail = f"rerun identical {same}; resume after k trials identical {resumed}"
    assert verdict(capsys, 6, ok, detail, t.seconds, 120)


def test_criterion_07_failure_accounting(capsys, csv_path):
    space = SearchSpace.from_values({"batch_size": [4, 16, 32, 64, 128], "d_model": [16, 32], "d_ff": [16, 32]})
    dims = Dims(12, 6, 3, 3)
    with Timer() as t:
        mem = {tuple(c.values()): estimate_memory("mixer", HParams.from_config(c), dims) for c in space.configs()}
        budget = sorted(mem.values())[17]
        over = [k for k, m in mem.items() if m > budget]
        plan = ExperimentPlan(variant="mixer", data_path=str(csv_path), space=space, searcher="grid", n_trials=20,
                              mem_budget=budget, seq_len=12, label_len=6, pred_len=6, clock="simulated",
                              fixed_params={"train_epochs": 1})
        result = run_experiment(plan)
        cell = oom_table([result]).cell("mixer", result.dataset)
        rows = oom_boundary(result.records)
        # constructed minima: smallest failing max/min width per failing batch size
        want = {}
        for bs, dm, dff in over:
            w = want.setdefault(bs, [10**9, 10**9])
            w[0], w[1] = min(w[0], max(dm, dff)), min(w[1], min(dm, dff))
        expected = [[str(bs), f"≥{a}", f"≥{b}"] for bs, (a, b) in sorted(want.items())]
        md = oom_boundary_markdown(rows, "mixer")
    ok = len(over) == 2 and cell == "10%" and [r.cells() for r in rows] == expected
    ok = ok and all(f"| mixer | {' | '.join(e)} |" in md for e in expected)
    detail = f"oom cell {cell!r}; boundary {[r.cells() for r in rows]} vs constructed {expected}"
    assert verdict(capsys, 7, ok, detail, t.seconds, 60)


def _bench(out, capsys):
    with Timer() as t:
        code = cli.main(["bench", "--synthetic", "--desk", "--out", str(out)])
    return code, json.loads(capsys.readouterr().out), t.seconds


def _report_bytes(root):
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != store.MANIFEST and "data" not in p.parts)
    return {str(p.relative_to(root)): p.read_bytes() for p in files}


@pytest.mark.slow
def test_criterion_08_desk_bench(capsys, tmp_path):
    code, summary, seconds = _bench(tmp_path / "a", capsys)
    a = tmp_path / "a"
    per_exp = ["importance.md", "curves.md", "oom.md", "parallel_coords.svg", "parallel_coords_trimmed.svg"]
    have = all((a / d.split("/")[-1] / "report" / f).exists() for d in summary["experiments"] for f in per_exp)
    best = (a / "best_results.md").read_text()
    marks = best.count("**") // 2 == 3 and best.count("<u>") == 3
    _, _, seconds_b = _bench(tmp_path / "b", capsys)
    stable = _report_bytes(a) == _report_bytes(tmp_path / "b")
    ok = code == 0 and summary["total_trials"] == 180 and len(summary["experiments"]) == 9
    ok = ok and have and marks and (a / "oom.md").exists() and stable
    detail = (
        f"{summary['total_trials']} trials over {len(summary['experiments'])} experiments, exit {code}; "
        f"all report files {have}; bold/underline per dataset {marks}; byte-stable rerun {stable} "
        f"(rerun {seconds_b:.0f}s)"
    )
    assert verdict(capsys, 8, ok, detail, max(seconds, seconds_b), 600)


def test_criterion_09_curve_diagnosis(capsys):
    def curve(train, val):
        return [EpochRecord(i + 1, a, b, 1e-3) for i, (a, b) in enumerate(zip(train, val))]

    with Timer() as t:
        labels = [
            diagnose_curve(curve([1.0, 0.8, 0.6], [1.3, 1.1, 0.9])).label,
            diagnose_curve(curve([1.0, 0.8, 0.6, 0.5], [1.0, 0.8, 0.9, 1.0])).label,
            diagnose_curve(curve([1.0, 0.5, 0.4], [1.0, 0.52, 0.41])).label,
        ]
    ok = labels == [UNDERFIT, OVERFIT, CONVERGED]
    assert verdict(capsys, 9, ok, f"labels {labels}", t.seconds, 1)


def test_criterion_10_window_formula(capsys):
    mismatches = 0
    with Timer() as t, warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for n in range(1, 501):
            values = np.arange(n, dtype=float).reshape(n, 1)
            for seq in (8, 96):
                for pred in (8, 96):
                    ws = make_windows(values, seq, 0, pred)
                    want = windows_brute_force(values, seq, pred)
                    if len(ws) != len(want):
                        mismatches += 1
                    elif want and not (np.array_equal(ws.inputs[-1], want[-1][0]) and np.array_equal(ws.targets[-1], want[-1][1])):
                        mismatches += 1
    assert verdict(capsys, 10, mismatches == 0, f"{mismatches} mismatches over 2000 cases", t.seconds, 5)
