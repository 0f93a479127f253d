import numpy as np
import pytest

from tsfhpo.forecast.data import gen_synthetic, prepare_data
from tsfhpo.hyperspace import SearchSpace

TINY = dict(seq_len=12, label_len=6, pred_len=6)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def csv_path(tmp_path):
    path = tmp_path / "syn.csv"
    gen_synthetic(3, 240, seasonal_period=12, noise_std=0.05, seed=3, path=path)
    return path


@pytest.fixture
def tiny_data():
    ds = gen_synthetic(3, 240, seasonal_period=12, noise_std=0.05, seed=3)
    return prepare_data(ds, **TINY)


@pytest.fixture
def small_space():
    """Cheap space whose every point trains in milliseconds."""
    return SearchSpace.from_values(
        {
            "d_model": [16, 32],
            "d_ff": [16, 32],
            "n_heads": [2, 4],
            "e_layers": [1, 2],
            "batch_size": [16, 32],
            "learning_rate": [0.001, 0.01],
            "train_epochs": [1, 2, 3],
        }
    )
