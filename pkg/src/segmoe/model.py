"""Encoder-only forecasting model: patch embedding, pre-norm residual blocks
(grouped-query attention + segment-wise MoE), flatten head to H_o steps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .data import patchify
from .layers import GQAttention, Linear, RMSNorm, dropout, droppath, droppath_keep_prob
from .moe import RouteDecision, SegMoELayer
from .tensor import Tensor, no_grad


class EncoderBlock:
    """Pre-norm residual block: x + DropPath(ATT(Norm(x))), then the same
    wiring with the segment-wise MoE in place of a dense feed-forward."""

    def __init__(self, rng, cfg: ModelConfig, block: int):
        name = f"blocks.{block}"
        self.index = block
        self.keep_prob = droppath_keep_prob(block, cfg.blocks, cfg.droppath_max)
        self.dropout_p = cfg.dropout
        self.attn_norm = RMSNorm(cfg.d_model, f"{name}.attn_norm")
        self.attn = GQAttention(rng, cfg.d_model, cfg.q_heads, cfg.kv_heads,
                                cfg.rope_base, cfg.dropout, f"{name}.attn")
        self.moe_norm = RMSNorm(cfg.d_model, f"{name}.moe_norm")
        omega = cfg.omega_schedule()[block]
        self.moe = SegMoELayer(rng, cfg.d_model, cfg.d_ff, cfg.experts, cfg.top_k,
                               omega, f"{name}.moe")

    def __call__(self, x: Tensor, key_valid: np.ndarray, train: bool,
                 rng: np.random.Generator | None,
                 frozen_selection: np.ndarray | None = None) -> tuple[Tensor, RouteDecision]:
        branch = self.attn(self.attn_norm(x), key_valid, train, rng)
        h = x + droppath(branch, self.keep_prob, train, rng)
        moe_out, decision = self.moe(self.moe_norm(h), frozen_selection)
        moe_out = dropout(moe_out, self.dropout_p, train, rng)
        z = h + droppath(moe_out, self.keep_prob, train, rng)
        return z, decision

    def named_params(self):
        yield from self.attn_norm.named_params()
        yield from self.attn.named_params()
        yield from self.moe_norm.named_params()
        yield from self.moe.named_params()


class Forecaster:
    """Maps a normalized look-back window of L values to H_o future values."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        m = cfg.n_patches
        self.embed = Linear(rng, cfg.patch_len, cfg.d_model, "embed")
        self.blocks = [EncoderBlock(rng, cfg, b) for b in range(cfg.blocks)]
        self.final_norm = RMSNorm(cfg.d_model, "final_norm")
        head_in = m * cfg.d_model if cfg.head_mode == "flatten" else cfg.d_model
        self.head = Linear(rng, head_in, cfg.h_out, "head")
        for block in self.blocks:
            block.attn.use_tiled = cfg.tiled_attention

    # ------------------------------------------------------------------ #

    def forward(self, windows: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None,
                frozen_routes: list[np.ndarray] | None = None) -> tuple[Tensor, list[RouteDecision]]:
        """windows: (n, L) instance-normalized look-backs -> ((n, H_o), decisions)."""
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 2 or windows.shape[1] != self.cfg.look_back:
            raise ValueError(
                f"expected windows of shape (n, {self.cfg.look_back}), got {windows.shape}"
            )
        patches, patch_mask = patchify(windows, self.cfg.patch_len)
        x = self.embed(Tensor(patches))
        decisions: list[RouteDecision] = []
        for b, block in enumerate(self.blocks):
            frozen = frozen_routes[b] if frozen_routes is not None else None
            x, decision = block(x, patch_mask, train, rng, frozen)
            decisions.append(decision)
        x = self.final_norm(x)
        n, m, d = x.shape
        if self.cfg.head_mode == "flatten":
            feats = x.reshape(n, m * d)
        else:
            feats = x[:, m - 1, :]
        return self.head(feats), decisions

    def predict(self, windows: np.ndarray) -> np.ndarray:
        """Inference forward pass: no graph, no stochastic regularization."""
        with no_grad():
            pred, _ = self.forward(windows, train=False)
        return pred.data

    # ------------------------------------------------------------------ #

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = list(self.embed.named_params())
        for block in self.blocks:
            out.extend(block.named_params())
        out.extend(self.final_norm.named_params())
        out.extend(self.head.named_params())
        return out

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_params()}

    def load_param_arrays(self, arrays: dict[str, np.ndarray]):
        params = dict(self.named_params())
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
        for name, t in params.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != expected {t.data.shape}")
            t.data = arr.copy()

    def zero_grads(self):
        for _, t in self.named_params():
            t.zero_grad()


# -------------------------------------------------------------------------- #
# parameter accounting


@dataclass
class LayerCount:
    name: str
    activated: int
    total: int


@dataclass
class ParamCountReport:
    layers: list[LayerCount]
    activated: int
    total: int

    def rows(self) -> list[tuple[str, int, int]]:
        return [(c.name, c.activated, c.total) for c in self.layers] + [
            ("overall", self.activated, self.total)
        ]


def count_params(cfg: ModelConfig) -> ParamCountReport:
    """Exact parameter counts from the config alone.

    `activated` excludes the (N - K) routed experts that a segment never
    touches; everything else (router, shared expert, attention, norms, head)
    is always active.
    """
    cfg.validate()
    d, dff = cfg.d_model, cfg.d_ff
    m = cfg.n_patches
    head_dim = cfg.head_dim
    layers: list[LayerCount] = []

    embed = cfg.patch_len * d + d
    layers.append(LayerCount("embed", embed, embed))

    for b, omega in enumerate(cfg.omega_schedule()):
        attn = (
            d * (cfg.q_heads * head_dim) + cfg.q_heads * head_dim
            + 2 * (d * (cfg.kv_heads * head_dim) + cfg.kv_heads * head_dim)
            + (cfg.q_heads * head_dim) * d + d
        )
        norms = 2 * d
        width = omega * d
        per_expert = width * dff + dff + dff * width + width
        router = width * cfg.experts
        shared = per_expert + (width + 1)
        moe_total = router + cfg.experts * per_expert + shared
        total = attn + norms + moe_total
        activated = total - (cfg.experts - cfg.top_k) * per_expert
        layers.append(LayerCount(f"block{b}(omega={omega})", activated, total))

    head_in = m * d if cfg.head_mode == "flatten" else d
    tail = d + head_in * cfg.h_out + cfg.h_out
    layers.append(LayerCount("head", tail, tail))

    total = sum(c.total for c in layers)
    activated = sum(c.activated for c in layers)
    return ParamCountReport(layers=layers, activated=activated, total=total)
