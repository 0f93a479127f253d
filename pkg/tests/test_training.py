import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tsfhpo.forecast.data import make_windows
from tsfhpo.forecast.models import HParams, build_model
from tsfhpo.forecast.training import Adam, EarlyStopping, evaluate, lr_at_epoch, train_trial
from tsfhpo.records import COMPLETED, FAILED_NUMERICAL, FAILED_OOM

FAST = HParams(d_model=16, d_ff=16, n_heads=2, e_layers=1, d_layers=1, batch_size=32, learning_rate=1e-3, train_epochs=3)


class Fixed:
    def __init__(self, pred):
        self.pred = np.asarray(pred, dtype=float)

    def forward(self, x):
        return np.broadcast_to(self.pred, (len(x),) + self.pred.shape)


def test_lr_schedule():
    assert lr_at_epoch(1e-3, 1) == 1e-3
    for e in range(1, 12):
        assert lr_at_epoch(1e-4, e) == 1e-4 * 0.5 ** (e - 1)


def test_early_stopping_sequence():
    stop = EarlyStopping(3)
    seq = [1.0, 0.9, 0.91, 0.92, 0.93, 0.94, 0.95]
    stopped_at = None
    for e, v in enumerate(seq, start=1):
        stop.step(v)
        if stop.should_stop:
            stopped_at = e
            break
    assert stopped_at == 5 and stop.best_epoch == 2


def test_early_stopping_equal_is_not_improvement():
    stop = EarlyStopping(2)
    assert stop.step(1.0)
    assert not stop.step(1.0)
    assert not stop.step(1.0)
    assert stop.should_stop


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([1.0, -2.0])}
    Adam(p).step(p, {"w": np.array([0.5, -3.0])}, lr=0.1)
    assert np.allclose(p["w"], [0.9, -1.9], atol=1e-6)


def test_evaluate_examples():
    ws = make_windows(np.zeros((3, 1)), 1, 0, 2)
    assert len(ws) == 1
    assert evaluate(Fixed([[1.0], [3.0]]), ws) == (5.0, 2.0)
    assert evaluate(Fixed([[0.0], [0.0]]), ws) == (0.0, 0.0)


def test_evaluate_empty():
    with pytest.warns(UserWarning):
        ws = make_windows(np.zeros((2, 1)), 2, 0, 2)
    with pytest.raises(ValueError):
        evaluate(Fixed([[0.0], [0.0]]), ws)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-100, 100)))
def test_mae_squared_at_most_mse(err):
    ws = make_windows(np.zeros((1 + len(err), 1)), 1, 0, len(err))
    mse, mae = evaluate(Fixed(err[:, None]), ws)
    assert mae * mae <= mse * (1 + 1e-12) + 1e-12


def test_budget_zero_is_oom(tiny_data):
    r = train_trial("mixer", FAST, tiny_data, 0, seed=1)
    assert r.status == FAILED_OOM and r.epochs == () and r.val_mse is None and r.mem_bytes > 0


def test_one_epoch(tiny_data):
    r = train_trial("mixer", HParams(**{**FAST.__dict__, "train_epochs": 1}), tiny_data, 1 << 30, seed=1)
    assert r.status == COMPLETED and len(r.epochs) == 1 and r.epochs[0].lr == FAST.learning_rate


@pytest.mark.parametrize("variant", ["linear", "mixer", "attention_lite"])
def test_train_trial_deterministic(tiny_data, variant):
    a = train_trial(variant, FAST, tiny_data, 1 << 30, seed=11, clock="simulated")
    b = train_trial(variant, FAST, tiny_data, 1 << 30, seed=11, clock="simulated")
    assert a == b
    assert a.to_dict() == b.to_dict()


def test_best_epoch_parameters_used(tiny_data):
    r = train_trial("attention_lite", HParams(**{**FAST.__dict__, "train_epochs": 6}), tiny_data, 1 << 30, seed=2)
    assert r.val_mse == min(e.val_loss for e in r.epochs)


def test_divergence_is_numerical_failure(tiny_data):
    hp = HParams(**{**FAST.__dict__, "learning_rate": 1e30, "train_epochs": 3})
    r = train_trial("mixer", hp, tiny_data, 1 << 30, seed=0)
    assert r.status == FAILED_NUMERICAL and r.val_mse is None and r.error


def test_simulated_clock_is_work_based(tiny_data):
    a = train_trial("mixer", FAST, tiny_data, 1 << 30, seed=1, clock="simulated")
    b = train_trial("mixer", HParams(**{**FAST.__dict__, "d_ff": 32}), tiny_data, 1 << 30, seed=1, clock="simulated")
    assert a.wall_ms >= 0 and (len(b.epochs) != len(a.epochs) or b.wall_ms >= a.wall_ms)


def test_negative_budget_rejected(tiny_data):
    with pytest.raises(ValueError):
        train_trial("linear", FAST, tiny_data, -1, seed=0)


def test_noise_free_linear_learns():
    from tsfhpo.forecast.data import gen_synthetic, prepare_data

    data = prepare_data(gen_synthetic(3, 2000, 24, 0.0, seed=3), 96, 48, 96)
    hp = HParams(batch_size=32, learning_rate=1e-3, train_epochs=10)
    init_seed = int(np.random.SeedSequence([5, 2]).generate_state(1)[0])
    initial, _ = evaluate(build_model("linear", hp, data.dims, init_seed), data.train)
    r = train_trial("linear", hp, data, 1 << 30, seed=5)
    assert r.epochs[-1].train_loss < 0.1 * initial
