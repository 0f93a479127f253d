import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import GRAD_DIMS, GRAD_HP, max_rel_grad_error
from tsfhpo.forecast.data import Dims
from tsfhpo.forecast.memory import MemoryGateFault, check_memory, estimate_memory
from tsfhpo.forecast.models import (
    IGNORED_PARAMS,
    VARIANTS,
    HParams,
    ModelError,
    NumericalFault,
    build_model,
    param_count,
    pooled_length,
    pooling_matrix,
)


@pytest.mark.parametrize("variant", VARIANTS)
def test_gradients_match_finite_differences(variant):
    assert max_rel_grad_error(variant, seed=0) <= 1e-4


def test_gradients_multi_output_subset():
    # MS mode: predict the target channel only
    dims = Dims(7, 3, 3, 1, target_in=2)
    for variant in VARIANTS:
        assert max_rel_grad_error(variant, seed=5, dims=dims) <= 1e-4


def test_linear_param_count():
    dims = Dims(96, 96, 7, 7)
    m = build_model("linear", HParams(), dims)
    assert m.n_params == param_count("linear", HParams(), dims) == 96 * 96 + 96 == 9312


def test_linear_ignores_model_define():
    assert set(IGNORED_PARAMS["linear"]) == {"d_model", "d_ff", "n_heads", "e_layers", "d_layers", "factor"}
    assert set(IGNORED_PARAMS["mixer"]) == {"n_heads", "factor"}
    assert IGNORED_PARAMS["attention_lite"] == ()


def test_pooled_length():
    assert pooled_length(96, 4) == 24
    P = pooling_matrix(7, 3)
    assert P.shape == (3, 7)
    assert np.allclose(P.sum(axis=1), 1.0)


def test_heads_must_divide_width():
    with pytest.raises(ModelError):
        build_model("attention_lite", HParams(d_model=16, n_heads=3), GRAD_DIMS)


def test_same_seed_same_init():
    a = build_model("attention_lite", GRAD_HP, GRAD_DIMS, seed=3)
    b = build_model("attention_lite", GRAD_HP, GRAD_DIMS, seed=3)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_shapes_and_eval_determinism(variant, rng):
    m = build_model(variant, GRAD_HP, GRAD_DIMS, seed=1)
    x = rng.normal(size=(1, 7, 3))
    out = m.forward(x)
    assert out.shape == (1, 3, 3)
    assert np.array_equal(out, m.forward(x))
    with pytest.raises(ModelError, match="expected input"):
        m.forward(rng.normal(size=(1, 6, 3)))


def test_dropout_only_in_train_mode(rng):
    m = build_model("mixer", GRAD_HP, GRAD_DIMS, seed=1)
    x = rng.normal(size=(2, 7, 3))
    a = m.forward(x, train_mode=True, rng=np.random.default_rng(0))
    b = m.forward(x, train_mode=True, rng=np.random.default_rng(1))
    assert not np.allclose(a, b)


def test_zero_linear_predicts_zero(rng):
    m = build_model("linear", GRAD_HP, GRAD_DIMS, zero_init=True)
    assert not m.forward(rng.normal(size=(4, 7, 3))).any()


def test_perfect_prediction_zero_grads(rng):
    m = build_model("linear", GRAD_HP, GRAD_DIMS, seed=2)
    x = rng.normal(size=(4, 7, 3))
    loss, grads = m.loss_and_grads(x, m.forward(x))
    assert loss == 0.0 and all(not g.any() for g in grads.values())


def test_negated_targets_symmetric_bias_grad(rng):
    m = build_model("linear", GRAD_HP, GRAD_DIMS, zero_init=True)
    x = rng.normal(size=(4, 7, 3))
    y = rng.normal(size=(4, 3, 3))
    _, g1 = m.loss_and_grads(x, y)
    _, g2 = m.loss_and_grads(x, -y)
    assert np.allclose(np.abs(g1["b"]), np.abs(g2["b"]))


def test_non_finite_loss_is_fault(rng):
    m = build_model("linear", GRAD_HP, GRAD_DIMS, seed=2)
    x = rng.normal(size=(4, 7, 3))
    y = np.full((4, 3, 3), np.inf)
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(NumericalFault) as e:
            m.loss_and_grads(x, y, batch_index=7)
    assert e.value.batch_index == 7


# --- memory model ----------------------------------------------------------


def test_linear_memory_regression_constant():
    hp = HParams(batch_size=32)
    dims = Dims(96, 96, 7, 7)
    # 4 * (3 * 9312 + 32 * 96)
    assert estimate_memory("linear", hp, dims) == 124032


def test_memory_closed_form_attention():
    hp = HParams(d_model=32, d_ff=64, n_heads=4, e_layers=2, factor=4, batch_size=8)
    dims = Dims(96, 24, 7, 7)
    P = param_count("attention_lite", hp, dims)
    expected = 4 * (3 * P + 8 * 96 * 32 * 3 + 8 * 4 * 96 * 24 + 8 * 96 * 64)
    assert estimate_memory("attention_lite", hp, dims) == expected


def test_memory_examples():
    dims = Dims(96, 96, 7, 7)
    for v in VARIANTS:
        assert estimate_memory(v, HParams(batch_size=64), dims) > estimate_memory(v, HParams(batch_size=32), dims)
    assert estimate_memory("attention_lite", HParams(factor=1), dims) > estimate_memory("attention_lite", HParams(factor=4), dims)
    with pytest.raises(MemoryGateFault):
        check_memory("linear", HParams(), dims, 0)


_LADDERS = {
    "batch_size": [4, 16, 32, 64, 128, 256],
    "d_model": [16, 32, 64, 128, 256, 512, 1024, 2048, 4096],
    "d_ff": [16, 32, 64, 128, 256, 512, 1024, 2048, 4096],
    "e_layers": [1, 2, 3],
}


@settings(max_examples=250)
@given(
    st.sampled_from(VARIANTS),
    st.sampled_from(sorted(_LADDERS) + ["c"]),
    st.integers(0, 7),
    st.integers(0, 8),
    st.sampled_from([2, 4, 8, 16]),
    st.integers(1, 4),
    st.integers(1, 2),
    st.integers(1, 400),
)
def test_memory_monotone(variant, coord, i, j, heads, factor, d_layers, c):
    base = dict(batch_size=16, d_model=64, d_ff=64, e_layers=2, n_heads=heads, factor=factor, d_layers=d_layers)
    dims = Dims(24, 12, c, c)
    if coord == "c":
        lo_dims, hi_dims = dims, Dims(24, 12, c + 1 + i, c + 1 + i)
        lo = estimate_memory(variant, HParams(**base), lo_dims)
        hi = estimate_memory(variant, HParams(**base), hi_dims)
    else:
        ladder = _LADDERS[coord]
        a, b = sorted((i % len(ladder), j % len(ladder)))
        lo = estimate_memory(variant, HParams(**dict(base, **{coord: ladder[a]})), dims)
        hi = estimate_memory(variant, HParams(**dict(base, **{coord: ladder[b]})), dims)
    assert lo <= hi
