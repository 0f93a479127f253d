"""Desk-scale forecasters with hand-written backward passes.

Three variants consume different subsets of the tuned hyperparameters:

``linear``
    One affine map seq_len -> pred_len shared by every channel.
``mixer``
    Channel embedding, ``e_layers`` blocks of time-mixing + channel MLP,
    mean-pool over time, ``d_layers``-deep head.
``attention_lite``
    Channel + positional embedding, ``e_layers`` blocks of multi-head
    self-attention whose keys/values are average-pooled along time with
    kernel = stride = ``factor``, then an MLP; same pooling and head.

The two deep variants subtract each window's per-channel mean from the
input and add it back to the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Any, Mapping

import numpy as np

from .data import Dims

VARIANTS = ("linear", "mixer", "attention_lite")

MODEL_DEFINE_PARAMS = ("d_ff", "d_layers", "d_model", "e_layers", "factor", "n_heads")
IGNORED_PARAMS = {
    "linear": MODEL_DEFINE_PARAMS,
    "mixer": ("factor", "n_heads"),
    "attention_lite": (),
}

_GELU_K = math.sqrt(2.0 / math.pi)


class ModelError(ValueError):
    """Invalid hyperparameters or input shapes."""


class NumericalFault(ArithmeticError):
    def __init__(self, message: str, batch_index: int | None = None):
        self.batch_index = batch_index
        super().__init__(message if batch_index is None else f"{message} (batch {batch_index})")


@dataclass(frozen=True)
class HParams:
    d_model: int = 512
    d_ff: int = 2048
    n_heads: int = 8
    e_layers: int = 2
    d_layers: int = 1
    factor: int = 1
    batch_size: int = 32
    learning_rate: float = 0.0001
    train_epochs: int = 10
    dropout: float = 0.1
    patience: int = 3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "dropout":
                if not 0 <= v < 1:
                    raise ModelError(f"dropout must lie in [0, 1), got {v}")
            elif v <= 0:
                raise ModelError(f"{f.name} must be positive, got {v}")

    @classmethod
    def from_config(cls, config: Mapping[str, Any], **overrides) -> "HParams":
        names = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in config.items() if k in names}
        kwargs.update(overrides)
        return cls(**kwargs)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_K * (x + 0.044715 * x**3)))


def gelu_grad(x):
    t = np.tanh(_GELU_K * (x + 0.044715 * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)


def pooling_matrix(length: int, factor: int) -> np.ndarray:
    """Average-pool rows of a ``length``-step sequence in windows of ``factor``.

    The last window may be partial; it averages what it covers.
    """
    n = -(-length // factor)
    P = np.zeros((n, length))
    for j in range(n):
        lo, hi = j * factor, min(length, (j + 1) * factor)
        P[j, lo:hi] = 1.0 / (hi - lo)
    return P


def _dense_backward(x, W, dy):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dy.reshape(-1, dy.shape[-1])
    return (d2 @ W.T).reshape(x.shape), x2.T @ d2, d2.sum(axis=0)


def _split_heads(t, h):
    B, L, D = t.shape
    return t.reshape(B, L, h, D // h).transpose(0, 2, 1, 3)


def _merge_heads(t):
    B, h, L, dh = t.shape
    return t.transpose(0, 2, 1, 3).reshape(B, L, h * dh)


def param_shapes(variant: str, hp: HParams, dims: Dims) -> dict[str, tuple[tuple[int, ...], int]]:
    """Parameter name -> (shape, fan_in), in initialization order."""
    if variant not in VARIANTS:
        raise ModelError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    L, P = dims.seq_len, dims.pred_len
    if variant == "linear":
        return {"W": ((P, L), L), "b": ((P,), L)}
    D, F = hp.d_model, hp.d_ff
    if variant == "attention_lite" and D % hp.n_heads:
        raise ModelError(f"d_model={D} is not divisible by n_heads={hp.n_heads}")
    shapes: dict[str, tuple[tuple[int, ...], int]] = {
        "emb.W": ((dims.c_in, D), dims.c_in),
        "emb.b": ((D,), dims.c_in),
    }
    if variant == "attention_lite":
        shapes["emb.pos"] = ((L, D), dims.c_in)
    for i in range(hp.e_layers):
        p = f"blk{i}."
        if variant == "mixer":
            shapes[p + "time.W"] = ((L, L), L)
            shapes[p + "time.b"] = ((L,), L)
        else:
            for n in ("q", "k", "v", "o"):
                shapes[p + n + ".W"] = ((D, D), D)
                shapes[p + n + ".b"] = ((D,), D)
        shapes[p + "ff1.W"] = ((D, F), D)
        shapes[p + "ff1.b"] = ((F,), D)
        shapes[p + "ff2.W"] = ((F, D), F)
        shapes[p + "ff2.b"] = ((D,), F)
    for j in range(hp.d_layers - 1):
        shapes[f"head{j}.W"] = ((D, D), D)
        shapes[f"head{j}.b"] = ((D,), D)
    shapes["out.W"] = ((D, P * dims.c_out), D)
    shapes["out.b"] = ((P * dims.c_out,), D)
    return shapes


def param_count(variant: str, hp: HParams, dims: Dims) -> int:
    return sum(math.prod(shape) for shape, _ in param_shapes(variant, hp, dims).values())


def pooled_length(seq_len: int, factor: int) -> int:
    return -(-seq_len // factor)


def forward_macs(variant: str, hp: HParams, dims: Dims) -> int:
    """Multiply-accumulates of one forward pass on one window."""
    L, P = dims.seq_len, dims.pred_len
    if variant == "linear":
        c = dims.c_in if dims.c_out == dims.c_in else 1
        return P * L * c
    D, F = hp.d_model, hp.d_ff
    macs = L * dims.c_in * D + (hp.d_layers - 1) * D * D + D * P * dims.c_out
    per_block = 2 * L * D * F
    if variant == "mixer":
        per_block += L * L * D
    else:
        Lp = pooled_length(L, hp.factor)
        per_block += L * Lp * D + 2 * L * D * D + 2 * Lp * D * D + 2 * L * Lp * D
    return macs + hp.e_layers * per_block


class Model:
    """A forecaster: ``(B, seq_len, c_in) -> (B, pred_len, c_out)``."""

    def __init__(self, variant: str, hparams: HParams, dims: Dims, seed: int = 0, zero_init: bool = False):
        self.variant = variant
        self.hp = hparams
        self.dims = dims
        self.seed = seed
        shapes = param_shapes(variant, hparams, dims)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for name, (shape, fan_in) in shapes.items():
            if zero_init:
                self.params[name] = np.zeros(shape)
            else:
                bound = 1.0 / math.sqrt(fan_in)
                self.params[name] = rng.uniform(-bound, bound, size=shape)
        if variant == "attention_lite":
            self._pool = pooling_matrix(dims.seq_len, hparams.factor)
        self._out_sel = slice(None) if dims.c_out == dims.c_in else [dims.target_in]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def ignored_params(self) -> tuple[str, ...]:
        return IGNORED_PARAMS[self.variant]

    def forward(self, x: np.ndarray, train_mode: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
        return self._forward(x, train_mode, rng)[0]

    def loss_and_grads(
        self,
        x: np.ndarray,
        y: np.ndarray,
        train_mode: bool = False,
        rng: np.random.Generator | None = None,
        batch_index: int | None = None,
    ) -> tuple[float, dict[str, np.ndarray]]:
        """Mean squared error over every element and its exact gradient."""
        pred, cache = self._forward(x, train_mode, rng)
        if y.shape != pred.shape:
            raise ModelError(f"target shape {y.shape} does not match prediction shape {pred.shape}")
        err = pred - y
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            raise NumericalFault("non-finite training loss", batch_index)
        grads = self._backward(2.0 * err / err.size, cache)
        return loss, grads

    # ------------------------------------------------------------------
    def _check_input(self, x):
        want = (self.dims.seq_len, self.dims.c_in)
        if x.ndim != 3 or x.shape[1:] != want:
            raise ModelError(f"expected input of shape (B, {want[0]}, {want[1]}), got {x.shape}")

    def _mask(self, shape, train_mode, rng):
        p = self.hp.dropout
        if not train_mode or p == 0:
            return None
        if rng is None:
            raise ModelError("train_mode forward needs an rng for dropout")
        return (rng.random(shape) >= p) / (1.0 - p)

    def _forward(self, x, train_mode, rng):
        self._check_input(x)
        if self.variant == "linear":
            return self._linear_forward(x)
        return self._deep_forward(x, train_mode, rng)

    def _backward(self, dy, cache):
        if self.variant == "linear":
            return self._linear_backward(dy, cache)
        return self._deep_backward(dy, cache)

    # --- linear --------------------------------------------------------
    def _linear_forward(self, x):
        xs = x if self.dims.c_out == self.dims.c_in else x[:, :, [self.dims.target_in]]
        W, b = self.params["W"], self.params["b"]
        y = W @ xs + b[:, None]
        return y, xs

    def _linear_backward(self, dy, xs):
        dW = np.einsum("bpc,blc->pl", dy, xs)
        return {"W": dW, "b": dy.sum(axis=(0, 2))}

    # --- mixer / attention_lite ----------------------------------------
    def _deep_forward(self, x, train_mode, rng):
        p = self.params
        hp = self.hp
        B = x.shape[0]
        mean = x.mean(axis=1, keepdims=True)
        xc = x - mean
        H = xc @ p["emb.W"] + p["emb.b"]
        if self.variant == "attention_lite":
            H = H + p["emb.pos"]
        blocks = []
        for i in range(hp.e_layers):
            pre = f"blk{i}."
            if self.variant == "mixer":
                H, c = self._mixer_block(H, pre, train_mode, rng)
            else:
                H, c = self._attention_block(H, pre, train_mode, rng)
            blocks.append(c)
        z = H.mean(axis=1)
        head = []
        for j in range(hp.d_layers - 1):
            u = z @ p[f"head{j}.W"] + p[f"head{j}.b"]
            head.append((z, u))
            z = gelu(u)
        out = z @ p["out.W"] + p["out.b"]
        y = out.reshape(B, self.dims.pred_len, self.dims.c_out) + mean[:, :, self._out_sel]
        return y, (xc, blocks, head, z)

    def _mlp(self, H1, pre, train_mode, rng):
        p = self.params
        Z = H1 @ p[pre + "ff1.W"] + p[pre + "ff1.b"]
        A = gelu(Z)
        M = A @ p[pre + "ff2.W"] + p[pre + "ff2.b"]
        m2 = self._mask(M.shape, train_mode, rng)
        H2 = H1 + (M if m2 is None else M * m2)
        return H2, (H1, Z, A, m2)

    def _mlp_backward(self, dH2, pre, cache, grads):
        p = self.params
        H1, Z, A, m2 = cache
        dM = dH2 if m2 is None else dH2 * m2
        dA, grads[pre + "ff2.W"], grads[pre + "ff2.b"] = _dense_backward(A, p[pre + "ff2.W"], dM)
        dZ = dA * gelu_grad(Z)
        dH1, grads[pre + "ff1.W"], grads[pre + "ff1.b"] = _dense_backward(H1, p[pre + "ff1.W"], dZ)
        return dH1 + dH2

    def _mixer_block(self, H, pre, train_mode, rng):
        p = self.params
        T = p[pre + "time.W"] @ H + p[pre + "time.b"][:, None]
        m1 = self._mask(T.shape, train_mode, rng)
        H1 = H + (T if m1 is None else T * m1)
        H2, mlp = self._mlp(H1, pre, train_mode, rng)
        return H2, (H, m1, mlp)

    def _mixer_block_backward(self, dH2, pre, cache, grads):
        p = self.params
        H, m1, mlp = cache
        dH1 = self._mlp_backward(dH2, pre, mlp, grads)
        dT = dH1 if m1 is None else dH1 * m1
        grads[pre + "time.W"] = np.einsum("btd,bsd->ts", dT, H)
        grads[pre + "time.b"] = dT.sum(axis=(0, 2))
        return dH1 + p[pre + "time.W"].T @ dT

    def _attention_block(self, H, pre, train_mode, rng):
        p = self.params
        h = self.hp.n_heads
        Hp = self._pool @ H
        Q = _split_heads(H @ p[pre + "q.W"] + p[pre + "q.b"], h)
        K = _split_heads(Hp @ p[pre + "k.W"] + p[pre + "k.b"], h)
        V = _split_heads(Hp @ p[pre + "v.W"] + p[pre + "v.b"], h)
        scale = 1.0 / math.sqrt(Q.shape[-1])
        S = (Q @ K.transpose(0, 1, 3, 2)) * scale
        S = S - S.max(axis=-1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=-1, keepdims=True)
        O = _merge_heads(A @ V)
        out = O @ p[pre + "o.W"] + p[pre + "o.b"]
        m1 = self._mask(out.shape, train_mode, rng)
        H1 = H + (out if m1 is None else out * m1)
        H2, mlp = self._mlp(H1, pre, train_mode, rng)
        return H2, (H, Hp, Q, K, V, A, O, scale, m1, mlp)

    def _attention_block_backward(self, dH2, pre, cache, grads):
        p = self.params
        h = self.hp.n_heads
        H, Hp, Q, K, V, A, O, scale, m1, mlp = cache
        dH1 = self._mlp_backward(dH2, pre, mlp, grads)
        dout = dH1 if m1 is None else dH1 * m1
        dO, grads[pre + "o.W"], grads[pre + "o.b"] = _dense_backward(O, p[pre + "o.W"], dout)
        dOh = _split_heads(dO, h)
        dA = dOh @ V.transpose(0, 1, 3, 2)
        dV = A.transpose(0, 1, 3, 2) @ dOh
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        dH, grads[pre + "q.W"], grads[pre + "q.b"] = _dense_backward(H, p[pre + "q.W"], _merge_heads(dQ))
        dHp_k, grads[pre + "k.W"], grads[pre + "k.b"] = _dense_backward(Hp, p[pre + "k.W"], _merge_heads(dK))
        dHp_v, grads[pre + "v.W"], grads[pre + "v.b"] = _dense_backward(Hp, p[pre + "v.W"], _merge_heads(dV))
        return dH1 + dH + self._pool.T @ (dHp_k + dHp_v)

    def _deep_backward(self, dy, cache):
        p = self.params
        xc, blocks, head, z = cache
        B = dy.shape[0]
        grads: dict[str, np.ndarray] = {}
        dout = dy.reshape(B, -1)
        dz, grads["out.W"], grads["out.b"] = _dense_backward(z, p["out.W"], dout)
        for j in reversed(range(len(head))):
            zin, u = head[j]
            du = dz * gelu_grad(u)
            dz, grads[f"head{j}.W"], grads[f"head{j}.b"] = _dense_backward(zin, p[f"head{j}.W"], du)
        L = self.dims.seq_len
        dH = np.broadcast_to(dz[:, None, :] / L, (B, L, dz.shape[-1]))
        for i in reversed(range(len(blocks))):
            pre = f"blk{i}."
            if self.variant == "mixer":
                dH = self._mixer_block_backward(dH, pre, blocks[i], grads)
            else:
                dH = self._attention_block_backward(dH, pre, blocks[i], grads)
        if self.variant == "attention_lite":
            grads["emb.pos"] = dH.sum(axis=0)
        _, grads["emb.W"], grads["emb.b"] = _dense_backward(xc, p["emb.W"], dH)
        return {name: grads[name] for name in p}


def build_model(variant: str, hparams: HParams, dims: Dims, seed: int = 0, zero_init: bool = False) -> Model:
    return Model(variant, hparams, dims, seed, zero_init)
