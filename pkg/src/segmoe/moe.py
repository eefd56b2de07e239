"""Segment-wise sparse mixture-of-experts.

Tokens are grouped into contiguous segments of length omega; each segment is
flattened, routed by a linear gate with softmax + Top-K selection (no
renormalization of the surviving scores), and transformed by the selected
expert FFNs plus an always-on sigmoid-gated shared expert. With omega = 1 the
layer degenerates to plain token-wise routing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Linear, xavier_uniform
from .tensor import Tensor


def multi_resolution_schedule(omega, blocks: int) -> list[int]:
    """Broadcast a scalar segment length to all blocks, or validate a list."""
    if isinstance(omega, (int, np.integer)):
        return [int(omega)] * blocks
    schedule = [int(w) for w in omega]
    if len(schedule) != blocks:
        raise ValueError(
            f"omega schedule has {len(schedule)} entries but the model has {blocks} blocks"
        )
    return schedule


# -------------------------------------------------------------------------- #
# segmentation


@dataclass
class SegBatch:
    """(batch, C, omega, d_model) view of a token sequence.

    Only the final segment may contain padded positions, which hold exact
    zeros on entry; `valid` marks real slots.
    """

    segments: Tensor
    valid: np.ndarray  # (C, omega) bool
    n_tokens: int
    omega: int


def segment(tokens: Tensor, omega: int) -> SegBatch:
    if omega < 1:
        raise ValueError(f"segment length must be >= 1, got {omega}")
    n, m, d = tokens.shape
    c = -(-m // omega)
    pad = c * omega - m
    padded = tokens.pad_axis(1, pad)
    segs = padded.reshape(n, c, omega, d)
    valid = (np.arange(c * omega) < m).reshape(c, omega)
    return SegBatch(segments=segs, valid=valid, n_tokens=m, omega=omega)


def unsegment(seg_out: Tensor, n_tokens: int) -> Tensor:
    n, c, omega, d = seg_out.shape
    return seg_out.reshape(n, c * omega, d)[:, :n_tokens, :]


def _flatten_masked(seg: SegBatch) -> Tensor:
    """(batch*C, omega*d) rows; padded slots are forced to zero so they cannot
    bias the router or the experts, whatever the caller wrote there."""
    n, c, omega, d = seg.segments.shape
    masked = seg.segments * Tensor(seg.valid[None, :, :, None].astype(np.float64))
    return masked.reshape(n * c, omega * d)


# -------------------------------------------------------------------------- #
# routing


@dataclass
class RouteDecision:
    """Per-segment routing outcome over a batch of segments."""

    scores: Tensor            # (S, N) softmax probabilities
    selected: np.ndarray      # (S, K) expert indices, ties to the lowest index
    gates: Tensor             # (S, N), raw scores at selected slots, zero elsewhere
    shared_gate: Tensor | None  # (S, 1) in (0, 1)
    counts: np.ndarray        # (N,) selections per expert
    n_segments: int

    @property
    def n_experts(self) -> int:
        return self.scores.shape[1]

    @property
    def top_k(self) -> int:
        return self.selected.shape[1]


def top_k_select(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the K largest entries per row; ties break to the lowest index."""
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[:, :k]


def route(seg: SegBatch, router_w: Tensor, k: int,
          frozen_selection: np.ndarray | None = None) -> RouteDecision:
    flat = _flatten_masked(seg)
    return _route_flat(flat, router_w, k, frozen_selection)


def _route_flat(flat: Tensor, router_w: Tensor, k: int,
                frozen_selection: np.ndarray | None = None) -> RouteDecision:
    if flat.shape[-1] != router_w.shape[0]:
        raise ValueError(
            f"router weight shape {router_w.shape} does not match flattened segment width {flat.shape[-1]}"
        )
    n_experts = router_w.shape[1]
    scores = flat.matmul(router_w).softmax(axis=-1)
    selected = frozen_selection if frozen_selection is not None else top_k_select(scores.data, k)
    one_hot = np.zeros(scores.shape)
    np.put_along_axis(one_hot, selected, 1.0, axis=1)
    gates = scores * Tensor(one_hot)
    counts = np.bincount(selected.reshape(-1), minlength=n_experts).astype(np.int64)
    return RouteDecision(
        scores=scores,
        selected=selected,
        gates=gates,
        shared_gate=None,
        counts=counts,
        n_segments=flat.shape[0],
    )


# -------------------------------------------------------------------------- #
# experts


class FeedForward:
    """Two-layer expert: width -> d_ff -> width with a smooth GELU between."""

    def __init__(self, rng, width: int, d_ff: int, name: str):
        self.name = name
        self.w1 = Tensor(xavier_uniform(rng, width, d_ff), requires_grad=True)
        self.b1 = Tensor(np.zeros(d_ff), requires_grad=True)
        self.w2 = Tensor(xavier_uniform(rng, d_ff, width), requires_grad=True)
        self.b2 = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return (x.matmul(self.w1) + self.b1).gelu().matmul(self.w2) + self.b2

    def named_params(self):
        yield f"{self.name}.w1", self.w1
        yield f"{self.name}.b1", self.b1
        yield f"{self.name}.w2", self.w2
        yield f"{self.name}.b2", self.b2

    def param_count(self) -> int:
        return self.w1.size + self.b1.size + self.w2.size + self.b2.size


class ExpertBank:
    """N routed experts (identical architecture) plus one shared fallback."""

    def __init__(self, rng, width: int, d_ff: int, n_experts: int, name: str):
        self.width = width
        self.experts = [FeedForward(rng, width, d_ff, f"{name}.expert{i}") for i in range(n_experts)]
        self.shared = FeedForward(rng, width, d_ff, f"{name}.shared")
        self.shared_gate = Linear(rng, width, 1, f"{name}.shared_gate")

    def named_params(self):
        for e in self.experts:
            yield from e.named_params()
        yield from self.shared.named_params()
        yield from self.shared_gate.named_params()


class SegMoELayer:
    """One segment-wise MoE sub-layer with a fixed segment length."""

    def __init__(self, rng, d_model: int, d_ff: int, n_experts: int, top_k: int,
                 omega: int, name: str, shared_expert: bool = True):
        self.omega = omega
        self.top_k = top_k
        self.n_experts = n_experts
        self.use_shared = shared_expert
        width = omega * d_model
        self.router_w = Tensor(xavier_uniform(rng, width, n_experts), requires_grad=True)
        self.router_name = f"{name}.router.w"
        self.bank = ExpertBank(rng, width, d_ff, n_experts, name)

    def __call__(self, tokens: Tensor,
                 frozen_selection: np.ndarray | None = None) -> tuple[Tensor, RouteDecision]:
        seg = segment(tokens, self.omega)
        return self.apply_segments(seg, frozen_selection)

    def apply_segments(self, seg: SegBatch,
                       frozen_selection: np.ndarray | None = None) -> tuple[Tensor, RouteDecision]:
        n, c, omega, d = seg.segments.shape
        flat = _flatten_masked(seg)
        decision = _route_flat(flat, self.router_w, self.top_k, frozen_selection)

        total = flat.shape[0]
        out = None
        if self.use_shared:
            gate = self.bank.shared_gate(flat).sigmoid()
            out = gate * self.bank.shared(flat)
            decision.shared_gate = gate
        for i, expert in enumerate(self.bank.experts):
            rows = np.nonzero((decision.selected == i).any(axis=1))[0]
            if rows.size == 0:
                continue
            picked = flat[rows]
            weighted = decision.scores[rows, np.full(rows.size, i)].reshape(rows.size, 1) * expert(picked)
            contrib = weighted.scatter_rows(rows, total)
            out = contrib if out is None else out + contrib
        if out is None:
            out = Tensor(np.zeros(flat.shape))

        seg_out = out.reshape(n, c, omega, d)
        return unsegment(seg_out, seg.n_tokens), decision

    def named_params(self):
        yield self.router_name, self.router_w
        yield from self.bank.named_params()


# -------------------------------------------------------------------------- #
# routing statistics


@dataclass
class RoutingStats:
    f: np.ndarray        # fraction of selections per expert, sums to 1
    r: np.ndarray        # mean router probability per expert, sums to 1
    entropy: float       # usage entropy of f, in nats
    counts: np.ndarray
    n_segments: int


def usage_entropy(f: np.ndarray) -> float:
    f = np.asarray(f, dtype=np.float64)
    nz = f[f > 0]
    return float(-(nz * np.log(nz)).sum())


def routing_stats(decisions: RouteDecision | list[RouteDecision]) -> RoutingStats:
    """Aggregate expert usage over one or more batches of decisions."""
    if isinstance(decisions, RouteDecision):
        decisions = [decisions]
    if not decisions or sum(d.n_segments for d in decisions) == 0:
        raise ValueError("routing_stats needs at least one segment")
    k = decisions[0].top_k
    counts = np.sum([d.counts for d in decisions], axis=0)
    n_segments = sum(d.n_segments for d in decisions)
    score_sum = np.sum([d.scores.data.sum(axis=0) for d in decisions], axis=0)
    f = counts / (k * n_segments)
    r = score_sum / n_segments
    return RoutingStats(f=f, r=r, entropy=usage_entropy(f), counts=counts, n_segments=n_segments)
