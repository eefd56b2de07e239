"""Backbone building blocks: linear maps, RMSNorm, rotary embeddings,
grouped-query attention, and stochastic-depth regularization."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, make_op

RMSNORM_EPS = 1e-6


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """y = x @ w + b with Xavier-uniform weight and zero bias."""

    def __init__(self, rng: np.random.Generator, fan_in: int, fan_out: int, name: str):
        self.name = name
        self.w = Tensor(xavier_uniform(rng, fan_in, fan_out), requires_grad=True)
        self.b = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x.matmul(self.w) + self.b

    def named_params(self):
        yield f"{self.name}.w", self.w
        yield f"{self.name}.b", self.b


class RMSNorm:
    """x / sqrt(mean(x^2) + eps) * gain over the last axis."""

    def __init__(self, d_model: int, name: str):
        self.name = name
        self.gain = Tensor(np.ones(d_model), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        ms = (x * x).mean(axis=-1, keepdims=True)
        return x / (ms + RMSNORM_EPS).sqrt() * self.gain

    def named_params(self):
        yield f"{self.name}.gain", self.gain


# -------------------------------------------------------------------------- #
# rotary position embeddings


def rope_angles(positions: np.ndarray, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    if head_dim % 2 != 0:
        raise ValueError(f"rotary embeddings need an even head dimension, got {head_dim}")
    positions = np.asarray(positions, dtype=np.float64)
    freqs = base ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    theta = positions[:, None] * freqs[None, :]
    return np.cos(theta), np.sin(theta)


def rope_apply(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotate adjacent feature pairs of (..., M, head_dim) by position-scaled angles.

    Rotations are orthogonal, so the backward pass is the inverse rotation of
    the incoming gradient.
    """
    head_dim = x.shape[-1]
    cos, sin = rope_angles(positions, head_dim, base)

    def rotate(a: np.ndarray, c: np.ndarray, s: np.ndarray) -> np.ndarray:
        even = a[..., 0::2]
        odd = a[..., 1::2]
        out = np.empty_like(a)
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    return make_op(rotate(x.data, cos, sin), (x,), lambda g: (rotate(g, cos, -sin),))


# -------------------------------------------------------------------------- #
# attention


def tiled_softmax_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                            key_valid: np.ndarray, scale: float, tile: int = 16) -> np.ndarray:
    """Streaming-softmax attention: identical math to dense softmax, computed
    tile-by-tile over keys with a running max and denominator. Forward only."""
    m_keys = k.shape[-2]
    run_max = np.full(q.shape[:-1] + (1,), -np.inf)
    run_den = np.zeros(q.shape[:-1] + (1,))
    acc = np.zeros(q.shape[:-2] + (q.shape[-2], v.shape[-1]))
    for start in range(0, m_keys, tile):
        stop = min(start + tile, m_keys)
        scores = (q @ k[..., start:stop, :].swapaxes(-1, -2)) * scale
        scores = np.where(key_valid[start:stop], scores, -np.inf)
        tile_max = scores.max(axis=-1, keepdims=True)
        new_max = np.maximum(run_max, tile_max)
        correction = np.exp(run_max - new_max)
        w = np.exp(scores - new_max)
        run_den = run_den * correction + w.sum(axis=-1, keepdims=True)
        acc = acc * correction + w @ v[..., start:stop, :]
        run_max = new_max
    return acc / run_den


class GQAttention:
    """Bidirectional grouped-query attention with rotary embeddings.

    Each key/value head serves q_heads // kv_heads query heads; padded key
    positions are masked to -inf before the softmax, so they receive exactly
    zero weight.
    """

    def __init__(self, rng, d_model: int, q_heads: int, kv_heads: int,
                 rope_base: float, dropout: float, name: str):
        self.q_heads = q_heads
        self.kv_heads = kv_heads
        self.group = q_heads // kv_heads
        self.head_dim = d_model // q_heads
        self.rope_base = rope_base
        self.dropout = dropout
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.wq = Linear(rng, d_model, q_heads * self.head_dim, f"{name}.wq")
        self.wk = Linear(rng, d_model, kv_heads * self.head_dim, f"{name}.wk")
        self.wv = Linear(rng, d_model, kv_heads * self.head_dim, f"{name}.wv")
        self.wo = Linear(rng, q_heads * self.head_dim, d_model, f"{name}.wo")
        self.use_tiled = False

    def _split_heads(self, x: Tensor, heads: int) -> Tensor:
        n, m, _ = x.shape
        return x.reshape(n, m, heads, self.head_dim).transpose((0, 2, 1, 3))

    def __call__(self, x: Tensor, key_valid: np.ndarray,
                 train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        n, m, d = x.shape
        positions = np.arange(m)
        q = rope_apply(self._split_heads(self.wq(x), self.q_heads), positions, self.rope_base)
        k = rope_apply(self._split_heads(self.wk(x), self.kv_heads), positions, self.rope_base)
        v = self._split_heads(self.wv(x), self.kv_heads)

        if self.use_tiled and not train and not q.requires_grad:
            ctx = Tensor(self._tiled_context(q.data, k.data, v.data, key_valid))
        else:
            # (n, kvh, G, M, hd): the group axis broadcasts against shared k/v
            qg = (q * self.scale).reshape(n, self.kv_heads, self.group, m, self.head_dim)
            kg = k.reshape(n, self.kv_heads, 1, m, self.head_dim)
            vg = v.reshape(n, self.kv_heads, 1, m, self.head_dim)
            scores = qg.matmul(kg.swapaxes(-1, -2))
            invalid = ~np.asarray(key_valid, dtype=bool)
            if invalid.any():
                scores = scores.mask_fill(invalid[None, None, None, None, :], -np.inf)
            attn = scores.softmax(axis=-1)
            if train and self.dropout > 0.0:
                keep = (rng.random(attn.shape) >= self.dropout) / (1.0 - self.dropout)
                attn = attn * Tensor(keep)
            ctx = attn.matmul(vg).reshape(n, self.q_heads, m, self.head_dim)

        merged = ctx.transpose((0, 2, 1, 3)).reshape(n, m, self.q_heads * self.head_dim)
        return self.wo(merged)

    def _tiled_context(self, q: np.ndarray, k: np.ndarray, v: np.ndarray,
                       key_valid: np.ndarray) -> np.ndarray:
        n, _, m, hd = q.shape
        qg = q.reshape(n, self.kv_heads, self.group, m, hd)
        kg = k.reshape(n, self.kv_heads, 1, m, hd)
        vg = v.reshape(n, self.kv_heads, 1, m, hd)
        out = tiled_softmax_attention(qg, kg, vg, np.asarray(key_valid, dtype=bool), self.scale)
        return out.reshape(n, self.q_heads, m, hd)

    def named_params(self):
        for lin in (self.wq, self.wk, self.wv, self.wo):
            yield from lin.named_params()


# -------------------------------------------------------------------------- #
# regularization


def droppath_keep_prob(block: int, blocks: int, p_max: float) -> float:
    """Stochastic-depth survival: linear ramp from 1.0 down to 1 - p_max."""
    if blocks <= 1:
        return 1.0
    return 1.0 - (block / (blocks - 1)) * p_max


def droppath(x: Tensor, keep_prob: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Drop the whole residual branch per sample, rescaling by 1/keep."""
    if not train or keep_prob >= 1.0:
        return x
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep_prob) / keep_prob
    return x * Tensor(mask)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)
