"""Segment construction, routing, expert mixing, and the token-wise limit."""

import math

import numpy as np
import pytest

from segmoe.moe import (RouteDecision, SegBatch, SegMoELayer, multi_resolution_schedule,
                        route, routing_stats, segment, top_k_select, unsegment,
                        usage_entropy)
from segmoe.tensor import Tensor


def rng_of(seed):
    return np.random.default_rng(seed)


def ref_gelu(h):
    # mirror the engine's fp convention (multiply by 1/sqrt(2), then x * cdf)
    from scipy.special import erf

    return h * (0.5 * (1.0 + erf(h * (1.0 / np.sqrt(2.0)))))


# ---------------------------------------------------------------------- #
# segmentation


def test_segment_counts_and_padding():
    tokens = Tensor(rng_of(0).normal(size=(2, 64, 4)))
    seg = segment(tokens, 5)
    assert seg.segments.shape == (2, 13, 5, 4)
    assert seg.valid.sum() == 64
    # 64 = 12*5 + 4: the final segment holds 4 real tokens and 1 padded slot
    assert seg.valid[-1].tolist() == [True, True, True, True, False]
    assert np.all(seg.segments.data[:, -1, 4:, :] == 0.0)


def test_segment_omega_one_degenerate():
    tokens = Tensor(rng_of(1).normal(size=(1, 7, 3)))
    seg = segment(tokens, 1)
    assert seg.segments.shape == (1, 7, 1, 3)
    assert seg.valid.all()


def test_unsegment_inverts_segment_bit_exactly():
    rng = rng_of(2)
    for m, omega in [(64, 5), (7, 3), (12, 4), (1, 2), (9, 9), (10, 1)]:
        tokens = Tensor(rng.normal(size=(3, m, 6)))
        seg = segment(tokens, omega)
        back = unsegment(seg.segments, m)
        assert back.data.tobytes() == tokens.data.tobytes()


def test_segment_order_preserving():
    m, omega, d = 11, 4, 2
    tokens = Tensor(np.arange(m * d, dtype=np.float64).reshape(1, m, d))
    seg = segment(tokens, omega)
    for c in range(seg.segments.shape[1]):
        for j in range(omega):
            t = c * omega + j
            if t < m:
                assert np.array_equal(seg.segments.data[0, c, j], tokens.data[0, t])


# ---------------------------------------------------------------------- #
# routing


def test_route_hand_softmax_case():
    """Forced logits [2,1,0,-1], K=1: expert 0 wins with its softmax mass."""
    seg = segment(Tensor(np.ones((1, 1, 4))), 1)
    w = Tensor(np.zeros((4, 4)))
    w.data[:, :] = np.array([2.0, 1.0, 0.0, -1.0]) / 4.0  # ones @ w -> [2,1,0,-1]
    decision = route(seg, w, k=1)
    exps = [math.exp(v) for v in [2.0, 1.0, 0.0, -1.0]]
    expected = exps[0] / sum(exps)
    assert decision.selected.tolist() == [[0]]
    assert decision.gates.data[0, 0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.6439, abs=5e-5)
    assert np.all(decision.gates.data[0, 1:] == 0.0)


def test_route_uniform_logits_tie_break():
    seg = segment(Tensor(np.ones((1, 4, 8))), 1)
    w = Tensor(np.zeros((8, 4)))
    decision = route(seg, w, k=2)
    assert np.all(decision.selected == [0, 1])  # lowest-index ties
    assert np.allclose(decision.gates.data[:, :2], 0.25)
    assert np.all(decision.gates.data[:, 2:] == 0.0)


def test_route_k_equals_n_dense_limit():
    rng = rng_of(3)
    seg = segment(Tensor(rng.normal(size=(2, 6, 4))), 2)
    w = Tensor(rng.normal(size=(8, 3)))
    decision = route(seg, w, k=3)
    assert np.allclose(decision.gates.data, decision.scores.data, atol=0)


def test_route_shape_mismatch():
    seg = segment(Tensor(np.ones((1, 4, 4))), 2)
    with pytest.raises(ValueError, match="router weight"):
        route(seg, Tensor(np.zeros((4, 3))), k=1)


def test_gate_contract_fuzzed():
    """Exactly K nonzero gates, equal to softmax scores, K largest w/ low-index ties."""
    rng = rng_of(4)
    total = 0
    while total < 1000:
        s = int(rng.integers(1, 40))
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n + 1))
        omega = int(rng.integers(1, 4))
        d = int(rng.integers(1, 4))
        tokens = rng.normal(size=(1, s * omega, d))
        if rng.random() < 0.3:  # sprinkle exact ties via quantization
            tokens = np.round(tokens)
        seg = segment(Tensor(tokens), omega)
        w = Tensor(np.round(rng.normal(size=(omega * d, n)), 1))
        decision = route(seg, w, k=k)
        scores = decision.scores.data
        gates = decision.gates.data
        for row in range(scores.shape[0]):
            nonzero = np.nonzero(gates[row])[0]
            assert nonzero.size == k
            assert np.array_equal(np.sort(decision.selected[row]), nonzero)
            for j in nonzero:
                assert gates[row, j] == scores[row, j]  # no renormalization
            # independent reference: sort by (-score, index)
            ref = sorted(range(n), key=lambda i: (-scores[row, i], i))[:k]
            assert sorted(ref) == sorted(decision.selected[row].tolist())
        total += scores.shape[0]


def test_top_k_stable_tie_break():
    scores = np.array([[0.25, 0.25, 0.25, 0.25], [0.1, 0.4, 0.4, 0.1]])
    assert top_k_select(scores, 2).tolist() == [[0, 1], [1, 2]]


# ---------------------------------------------------------------------- #
# the layer


def make_layer(seed, d_model=4, d_ff=8, n=3, k=1, omega=2, shared=True):
    return SegMoELayer(rng_of(seed), d_model, d_ff, n, k, omega, "moe", shared_expert=shared)


def test_omega_one_equals_token_wise_moe():
    """With the shared gate ablated, the layer is exactly a token-wise MoE."""
    rng = rng_of(5)
    layer = make_layer(6, d_model=4, d_ff=8, n=4, k=2, omega=1, shared=False)
    tokens = Tensor(rng.normal(size=(2, 9, 4)))
    out, decision = layer(tokens)

    # reference token-wise mixture with the same weights
    flat = tokens.data.reshape(18, 4)
    logits = flat @ layer.router_w.data
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    scores = e / e.sum(axis=1, keepdims=True)
    ref = np.zeros_like(flat)
    for i, expert in enumerate(layer.bank.experts):
        sel = np.argsort(-scores, axis=1, kind="stable")[:, :2]
        rows = np.nonzero((sel == i).any(axis=1))[0]
        if rows.size == 0:
            continue
        h = ref_gelu(flat[rows] @ expert.w1.data + expert.b1.data)
        y = h @ expert.w2.data + expert.b2.data
        ref[rows] += scores[rows, i : i + 1] * y
    assert out.data.tobytes() == ref.reshape(2, 9, 4).tobytes()


def test_zero_experts_pass_residual_through():
    layer = make_layer(7)
    for _, p in layer.named_params():
        p.data[:] = 0.0
    tokens = Tensor(rng_of(8).normal(size=(1, 6, 4)))
    out, _ = layer(tokens)
    assert np.all(out.data == 0.0)  # block residual add leaves input unchanged


def test_single_segment_hand_computation():
    """2x2 toy case of the mixture equation, checked against hand arithmetic."""
    layer = SegMoELayer(rng_of(9), d_model=2, d_ff=2, n_experts=2, top_k=1, omega=1, name="moe")
    x = np.array([[0.3, -0.7]])
    tokens = Tensor(x.reshape(1, 1, 2))
    out, decision = layer(tokens)

    flat = x[0]
    logits = flat @ layer.router_w.data
    e = np.exp(logits - logits.max())
    s = e / e.sum()
    i = int(np.argmax(s))

    def ffn(f, v):
        h = ref_gelu(v @ f.w1.data + f.b1.data)
        return h @ f.w2.data + f.b2.data

    gate = 1.0 / (1.0 + np.exp(-(flat @ layer.bank.shared_gate.w.data + layer.bank.shared_gate.b.data)))
    expected = gate * ffn(layer.bank.shared, flat) + s[i] * ffn(layer.bank.experts[i], flat)
    assert np.allclose(out.data[0, 0], expected, atol=1e-12)


def test_padding_neutrality_fuzzed():
    """Real-position outputs ignore whatever lives in padded slots."""
    rng = rng_of(10)
    for _ in range(25):
        m = int(rng.integers(3, 20))
        omega = int(rng.integers(2, 7))
        if m % omega == 0:
            m += 1
        layer = make_layer(int(rng.integers(1000)), d_model=3, d_ff=5, n=3, k=2, omega=omega)
        tokens = Tensor(rng.normal(size=(2, m, 3)))
        clean, _ = layer(tokens)

        seg = segment(tokens, omega)
        junk = seg.segments.data.copy()
        junk[:, ~seg.valid, :] = rng.normal(size=junk[:, ~seg.valid, :].shape) * 100.0
        fuzzed, _ = layer.apply_segments(SegBatch(Tensor(junk), seg.valid, m, omega))
        assert np.array_equal(clean.data, fuzzed.data)


def test_trailing_zero_token_equals_padded_slot():
    """Dropping a zero last token to force padding changes nothing upstream."""
    rng = rng_of(11)
    omega, m, d = 4, 8, 3
    layer = make_layer(12, d_model=d, n=3, k=1, omega=omega)
    tokens = rng.normal(size=(1, m, d))
    tokens[0, -1, :] = 0.0  # the "extra" token carries the pad value
    full, _ = layer(Tensor(tokens))
    short, _ = layer(Tensor(tokens[:, : m - 1, :]))
    assert np.allclose(full.data[:, : m - 1, :], short.data, atol=1e-12)


def test_token_output_depends_only_on_own_segment():
    rng = rng_of(13)
    omega, m, d = 3, 9, 4
    layer = make_layer(14, d_model=d, omega=omega)
    base = rng.normal(size=(1, m, d))
    out0, _ = layer(Tensor(base))
    bumped = base.copy()
    bumped[0, 4, :] += 0.5  # perturb a token in segment 1
    out1, _ = layer(Tensor(bumped))
    changed = np.abs(out1.data - out0.data).sum(axis=2)[0] > 0
    assert not changed[0:3].any()  # segment 0 untouched
    assert not changed[6:9].any()  # segment 2 untouched
    assert changed[3:6].any()


def test_gradients_reach_only_selected_and_shared_experts():
    rng = rng_of(15)
    layer = make_layer(16, d_model=3, d_ff=4, n=4, k=1, omega=2)
    tokens = Tensor(rng.normal(size=(1, 2, 3)))  # a single segment
    out, decision = layer(tokens)
    (out * out).sum().backward()
    selected = set(decision.selected.ravel().tolist())
    for i, expert in enumerate(layer.bank.experts):
        has_grad = any(
            t.grad is not None and np.any(t.grad != 0) for _, t in expert.named_params()
        )
        assert has_grad == (i in selected)
    assert any(t.grad is not None and np.any(t.grad != 0)
               for _, t in layer.bank.shared.named_params())


# ---------------------------------------------------------------------- #
# schedule and statistics


def test_schedule_broadcast_and_verbatim():
    assert multi_resolution_schedule(5, 4) == [5, 5, 5, 5]
    assert multi_resolution_schedule([4, 5, 5, 4], 4) == [4, 5, 5, 4]


def test_schedule_wrong_length():
    with pytest.raises(ValueError, match="2 entries"):
        multi_resolution_schedule([5, 4], 4)


def stats_of(selected, scores, k):
    n = scores.shape[1]
    counts = np.bincount(selected.reshape(-1), minlength=n)
    return RouteDecision(
        scores=Tensor(scores),
        selected=selected,
        gates=Tensor(np.zeros_like(scores)),
        shared_gate=None,
        counts=counts,
        n_segments=scores.shape[0],
    )


def test_stats_all_to_one_expert():
    scores = np.tile([0.7, 0.1, 0.1, 0.1], (5, 1))
    d = stats_of(np.zeros((5, 1), dtype=int), scores, 1)
    st = routing_stats(d)
    assert st.f.tolist() == [1.0, 0.0, 0.0, 0.0]
    assert st.entropy == 0.0


def test_stats_uniform():
    scores = np.full((8, 4), 0.25)
    sel = np.array([[i % 4] for i in range(8)])
    st = routing_stats(stats_of(sel, scores, 1))
    assert np.allclose(st.f, 0.25)
    assert np.allclose(st.r, 0.25)
    assert st.entropy == pytest.approx(np.log(4))


def test_stats_match_brute_force_recount():
    rng = rng_of(17)
    decisions = []
    all_sel = []
    all_scores = []
    for _ in range(4):
        raw = rng.normal(size=(int(rng.integers(2, 10)), 5))
        e = np.exp(raw - raw.max(axis=1, keepdims=True))
        scores = e / e.sum(axis=1, keepdims=True)
        sel = top_k_select(scores, 2)
        decisions.append(stats_of(sel, scores, 2))
        all_sel.append(sel)
        all_scores.append(scores)
    st = routing_stats(decisions)
    sel = np.concatenate(all_sel)
    scores = np.concatenate(all_scores)
    f_ref = np.zeros(5)
    for row in sel:
        for i in row:
            f_ref[i] += 1
    f_ref /= 2 * scores.shape[0]
    r_ref = scores.mean(axis=0)
    assert np.allclose(st.f, f_ref, atol=1e-12)
    assert np.allclose(st.r, r_ref, atol=1e-12)
    assert st.f.sum() == pytest.approx(1.0, abs=1e-12)
    assert st.r.sum() == pytest.approx(1.0, abs=1e-12)


def test_usage_entropy_bounds():
    assert usage_entropy(np.array([1.0, 0.0])) == 0.0
    assert usage_entropy(np.full(8, 1 / 8)) == pytest.approx(np.log(8))
