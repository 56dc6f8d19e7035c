"""Neural building blocks on top of the autodiff tensor engine.

Linear layers, layer norm, dropout, multi-head self-attention, a causal
transformer encoder with sinusoidal position encoding, plain MLPs, and an
Adam optimizer with optional global-norm gradient clipping.  Parameters are
float64 tensors collected into flat name -> Tensor maps for optimizers and
checkpointing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, ParseError
from .tensor import Tensor, concat

NEG_MASK = -1e30  # additive attention mask; exp() underflows to exactly 0


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Affine map x @ W + b over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = Tensor(glorot_uniform(rng, d_in, d_out), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    """Normalize the last axis to zero mean / unit variance, then affine."""

    def __init__(self, dim: int, eps: float = 1e-5):
        if eps <= 0:
            raise ConfigurationError("layer norm eps must be positive")
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = centered.square().mean(axis=-1, keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        return normed * self.gain + self.bias

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: identity at eval or rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate {rate} outside [0, 1)")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode requires an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * Tensor(keep)


def causal_mask(t: int) -> Tensor:
    """[t, t] additive mask: 0 on/below the diagonal, NEG_MASK above."""
    m = np.triu(np.full((t, t), NEG_MASK), k=1)
    return Tensor(m)


class MultiHeadAttention:
    """Scaled dot-product self-attention with J heads and output projection."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ConfigurationError(f"model dim {d_model} not divisible by {n_heads} heads")
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_qkv = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)

    def _split(self, x: Tensor, batch: int, t: int) -> Tensor:
        return x.reshape(batch, t, self.n_heads, self.d_qkv).swapaxes(1, 2)

    def __call__(self, h: Tensor, causal: bool = True,
                 return_weights: bool = False):
        if h.ndim != 3:
            raise DimensionError(f"attention input must be [batch, time, dim], got {h.shape}")
        batch, t, dim = h.shape
        if dim != self.d_model:
            raise DimensionError(f"attention input dim {dim} != model dim {self.d_model}")
        q = self._split(self.wq(h), batch, t)
        k = self._split(self.wk(h), batch, t)
        v = self._split(self.wv(h), batch, t)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.d_qkv))
        if causal:
            scores = scores + causal_mask(t)
        weights = scores.softmax(axis=-1)
        out = (weights @ v).swapaxes(1, 2).reshape(batch, t, self.d_model)
        out = self.wo(out)
        if return_weights:
            return out, weights
        return out

    def params(self, prefix: str) -> dict[str, Tensor]:
        p = {}
        for name, layer in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            p.update(layer.params(f"{prefix}.{name}"))
        return p


class TransformerBlock:
    def __init__(self, d_model: int, n_heads: int, d_ff: int, drop_rate: float,
                 rng: np.random.Generator):
        self.mha = MultiHeadAttention(d_model, n_heads, rng)
        self.ff1 = Linear(d_model, d_ff, rng)
        self.ff2 = Linear(d_ff, d_model, rng)
        self.ln1 = LayerNorm(d_model)
        self.ln2 = LayerNorm(d_model)
        self.drop_rate = drop_rate

    def __call__(self, x: Tensor, causal: bool, training: bool,
                 rng: np.random.Generator | None) -> Tensor:
        x = self.ln1(x + dropout(self.mha(x, causal=causal), self.drop_rate, training, rng))
        ff = self.ff2(self.ff1(x).relu())
        return self.ln2(x + dropout(ff, self.drop_rate, training, rng))

    def params(self, prefix: str) -> dict[str, Tensor]:
        p = self.mha.params(f"{prefix}.mha")
        p.update(self.ff1.params(f"{prefix}.ff1"))
        p.update(self.ff2.params(f"{prefix}.ff2"))
        p.update(self.ln1.params(f"{prefix}.ln1"))
        p.update(self.ln2.params(f"{prefix}.ln2"))
        return p


def sinusoidal_encoding(t: int, d_model: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


class TransformerEncoder:
    """Input projection + sinusoidal positions + stacked causal blocks."""

    def __init__(self, d_in: int, d_model: int, n_layers: int, n_heads: int,
                 d_ff: int, drop_rate: float, rng: np.random.Generator,
                 causal: bool = True):
        self.proj = Linear(d_in, d_model, rng)
        self.blocks = [TransformerBlock(d_model, n_heads, d_ff, drop_rate, rng)
                       for _ in range(n_layers)]
        self.d_model = d_model
        self.causal = causal

    def __call__(self, tokens: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        if tokens.ndim != 3 or tokens.shape[1] == 0:
            raise DimensionError(f"encoder input must be non-empty [batch, time, dim], got {tokens.shape}")
        t = tokens.shape[1]
        x = self.proj(tokens) + Tensor(sinusoidal_encoding(t, self.d_model))
        for block in self.blocks:
            x = block(x, self.causal, training, rng)
        return x

    def params(self, prefix: str) -> dict[str, Tensor]:
        p = self.proj.params(f"{prefix}.proj")
        for i, block in enumerate(self.blocks):
            p.update(block.params(f"{prefix}.block{i}"))
        return p


class MLP:
    """Linear / ReLU stack with a linear final layer."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        if len(dims) < 2:
            raise ConfigurationError("MLP needs at least input and output dims")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor, frozen: bool = False) -> Tensor:
        # frozen: apply current weight values as constants so no gradient
        # reaches the MLP's own parameters
        for i, layer in enumerate(self.layers):
            w, b = (Tensor(layer.w.data), Tensor(layer.b.data)) if frozen else (layer.w, layer.b)
            x = x @ w + b
            if i < len(self.layers) - 1:
                x = x.relu()
        return x

    def params(self, prefix: str) -> dict[str, Tensor]:
        p = {}
        for i, layer in enumerate(self.layers):
            p.update(layer.params(f"{prefix}.l{i}"))
        return p


@dataclass
class Adam:
    """Adam with bias correction and optional global-norm clipping.

    Gradients are zeroed after each step; parameters with absent grads are
    treated as zero-gradient (left unchanged by the update's m/v decay only).
    """
    params: dict[str, Tensor]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 5.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if np.any(np.isnan(g)):
                raise NumericError(f"NaN gradient in parameter '{name}'")
            grads[name] = g
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = grads[name]
            m = self.m.get(name)
            v = self.v.get(name)
            m = self.beta1 * m + (1 - self.beta1) * g if m is not None else (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g if v is not None else (1 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# ---- checkpoint I/O ---------------------------------------------------------


def save_checkpoint(path, params: dict[str, Tensor], config: dict) -> None:
    """Single JSON file: architecture config header + name -> {shape, data}.

    Values are serialized through Python's repr round-trip, which is exact
    for float64.
    """
    payload = {
        "config": config,
        "params": {name: {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                   for name, p in params.items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed checkpoint {path}: {exc}") from exc
    params = {name: np.array(rec["data"], dtype=np.float64).reshape(rec["shape"])
              for name, rec in payload["params"].items()}
    return params, payload["config"]


def assign_checkpoint(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    missing = set(params) ^ set(values)
    if missing:
        raise ConfigurationError(f"checkpoint/model parameter mismatch: {sorted(missing)}")
    for name, p in params.items():
        if p.shape != values[name].shape:
            raise ConfigurationError(
                f"checkpoint shape {values[name].shape} != model shape {p.shape} for '{name}'")
        p.data = values[name].copy()
        p.grad = None
