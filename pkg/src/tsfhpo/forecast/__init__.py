"""Forecasting harness: data, desk-scale models, training and the memory model."""

from .data import (
    Dataset,
    Dims,
    ForecastData,
    IngestionError,
    Normalizer,
    Segment,
    SplitError,
    WindowSet,
    chrono_split,
    gen_synthetic,
    load_csv_dataset,
    make_windows,
    prepare_data,
    write_csv,
)
from .memory import MemoryGateFault, estimate_memory
from .models import (
    IGNORED_PARAMS,
    VARIANTS,
    HParams,
    Model,
    ModelError,
    NumericalFault,
    build_model,
    param_count,
)
from .training import Adam, EarlyStopping, evaluate, lr_at_epoch, train_trial
