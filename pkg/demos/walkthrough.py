"""Small end-to-end tour: generate data, search two models, read the reports.

    python3 demos/walkthrough.py [workdir]

Takes under a minute on a laptop CPU.
"""

import sys
import tempfile
from pathlib import Path

from tsfhpo.analysis import diagnose_curve, importance_ranking, write_report, write_summary
from tsfhpo.forecast.data import gen_synthetic
from tsfhpo.hyperspace import SearchSpace
from tsfhpo.scheduler import ExperimentPlan, run_experiment


def main(workdir: Path) -> None:
    csv = workdir / "toy.csv"
    gen_synthetic(5, 1200, seasonal_period=24, noise_std=0.1, seed=7, path=csv)
    print(f"data: {csv}")

    # A narrow slice of the builtin space so each trial is quick.
    space = SearchSpace.builtin().subset(["d_model", "e_layers", "batch_size", "learning_rate"])
    narrow = SearchSpace.from_values(
        {
            "d_model": [v for v in space["d_model"].values if v <= 64],
            "e_layers": space["e_layers"].values,
            "batch_size": [16, 32, 64],
            "learning_rate": space["learning_rate"].values,
        }
    )

    experiments = []
    for variant in ("linear", "mixer"):
        plan = ExperimentPlan(
            variant=variant,
            data_path=str(csv),
            space=narrow,
            n_trials=12,
            seed=3,
            seq_len=48,
            label_len=24,
            pred_len=24,
            mem_budget=2_000_000,
            fixed_params={"train_epochs": 4, "d_ff": 64},
            clock="simulated",
        )
        exp_dir = workdir / variant
        result = run_experiment(plan, exp_dir)
        experiments.append(exp_dir)
        best = result.best
        print(f"\n{variant}: {result.totals}")
        if best is None:
            continue
        print(f"  best trial {best.trial_id}: {best.params} val_mse={best.val_mse:.4f} test_mse={best.test_mse:.4f}")
        print(f"  curve: {diagnose_curve(best.epochs).label}")
        done = [r for r in result.records if r.val_mse is not None]
        if len(done) > 1:
            ranking = importance_ranking(done)
            print("  importance:", ", ".join(f"{n}={s:.2f}" for n, s in ranking.entries[:3]))
        write_report(exp_dir)

    paths = write_summary(experiments, workdir)
    print()
    print(Path(paths[0]).read_text())


if __name__ == "__main__":
    if len(sys.argv) > 1:
        root = Path(sys.argv[1])
        root.mkdir(parents=True, exist_ok=True)
        main(root)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
