"""Deterministic memory-cost model backing the out-of-memory gate."""

from __future__ import annotations

from .data import Dims
from .models import HParams, param_count, pooled_length

BYTES_PER_FLOAT = 4


class MemoryGateFault(MemoryError):
    def __init__(self, estimate: int, budget: int):
        self.estimate = estimate
        self.budget = budget
        super().__init__(f"estimated {estimate} bytes exceeds budget of {budget} bytes")


def estimate_memory(variant: str, hp: HParams, dims: Dims) -> int:
    """Bytes for weights, two optimizer moments and the main activations.

    The linear variant keeps one activation per input step (width 1, no
    encoder stack, no feed-forward term).
    """
    P = param_count(variant, hp, dims)
    B, L = hp.batch_size, dims.seq_len
    floats = 3 * P
    if variant == "linear":
        floats += B * L
    else:
        floats += B * L * hp.d_model * (hp.e_layers + 1)
        floats += B * L * hp.d_ff
        if variant == "attention_lite":
            floats += B * hp.n_heads * L * pooled_length(L, hp.factor)
    return BYTES_PER_FLOAT * floats


def check_memory(variant: str, hp: HParams, dims: Dims, budget_bytes: int) -> int:
    est = estimate_memory(variant, hp, dims)
    if est > budget_bytes:
        raise MemoryGateFault(est, budget_bytes)
    return est
