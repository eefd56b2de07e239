"""Acceptance suite: one test per criterion, one printed pass line each.

Run with `pytest tests/test_acceptance.py -v -s`. The desk-scale experiments
(criteria 8-10, 12) train real models on the fixed "sines-3ch" preset and
dominate the runtime; everything else finishes in seconds.
"""

import os
import statistics

import numpy as np
import pytest

from segmoe.config import ModelConfig, TrainConfig
from segmoe.data import (chronological_split, make_windows, preset,
                         standardize_by_train, synth_series)
from segmoe.forecasting import autoregressive_forecast, evaluate, persistence_forecast
from segmoe.gradcheck import check_gradients
from segmoe.layers import GQAttention, RMSNorm, rope_apply
from segmoe.losses import aux_balance_loss, huber, total_loss
from segmoe.model import Forecaster, count_params
from segmoe.moe import SegBatch, SegMoELayer, segment, unsegment
from segmoe.tensor import Tensor
from segmoe.trainer import fit


def ok(criterion: int, message: str):
    print(f"[acceptance] criterion {criterion:2d} PASS: {message}")


def ref_gelu(h):
    from scipy.special import erf

    return h * (0.5 * (1.0 + erf(h * (1.0 / np.sqrt(2.0)))))


# ========================================================================== #
# criterion 1: omega = 1 reduces to token-wise MoE bit-exactly


def token_moe_reference(tokens, router_w, experts, k):
    """Token-wise mixture: softmax scores, Top-K, weighted expert sum."""
    flat = tokens.reshape(-1, tokens.shape[-1])
    logits = flat @ router_w
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    scores = e / e.sum(axis=1, keepdims=True)
    sel = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    out = np.zeros_like(flat)
    for i, expert in enumerate(experts):
        rows = np.nonzero((sel == i).any(axis=1))[0]
        if rows.size == 0:
            continue
        h = ref_gelu(flat[rows] @ expert.w1.data + expert.b1.data)
        y = h @ expert.w2.data + expert.b2.data
        out[rows] += scores[rows, i : i + 1] * y
    return out.reshape(tokens.shape)


def test_c01_omega1_equivalence():
    rng = np.random.default_rng(101)
    for draw in range(100):
        d = int(rng.integers(2, 8))
        m = int(rng.integers(1, 12))
        n = int(rng.integers(2, 6))
        k = int(rng.integers(1, n + 1))
        layer = SegMoELayer(np.random.default_rng(int(rng.integers(1 << 30))),
                            d, int(rng.integers(2, 10)), n, k, omega=1,
                            name="moe", shared_expert=False)
        tokens = rng.normal(size=(int(rng.integers(1, 4)), m, d))
        got, _ = layer(Tensor(tokens))
        want = token_moe_reference(tokens, layer.router_w.data, layer.bank.experts, k)
        assert got.data.tobytes() == want.tobytes(), f"draw {draw} differs"
    ok(1, "Seg-MoE(omega=1, shared gate ablated) == token-wise MoE bit-exactly, 100 draws")


# ========================================================================== #
# criterion 2: gate contract


def test_c02_gate_contract():
    rng = np.random.default_rng(202)
    seen = 0
    while seen < 1000:
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n + 1))
        omega = int(rng.integers(1, 5))
        d = int(rng.integers(1, 5))
        s = int(rng.integers(1, 50))
        tokens = rng.normal(size=(1, s * omega, d))
        if rng.random() < 0.25:
            tokens = np.round(tokens * 2) / 2  # provoke ties
        layer = SegMoELayer(np.random.default_rng(7), d, 4, n, k, omega, "m")
        _, decision = layer(Tensor(tokens))
        scores, gates = decision.scores.data, decision.gates.data
        for row in range(scores.shape[0]):
            nz = np.nonzero(gates[row])[0]
            assert nz.size == k, "gate sparsity violated"
            assert np.array_equal(np.sort(decision.selected[row]), nz)
            assert all(gates[row, j] == scores[row, j] for j in nz), "renormalized gate"
            ref = sorted(range(n), key=lambda i: (-scores[row, i], i))[:k]
            assert sorted(ref) == sorted(decision.selected[row].tolist()), "not the K largest"
        seen += scores.shape[0]
    ok(2, f"exactly K nonzero gates == softmax scores on {seen} fuzzed segments")


# ========================================================================== #
# criterion 3: balance-loss anchors


def test_c03_balance_loss_anchors():
    for n in (2, 4, 8, 32):
        uniform = np.full(n, 1.0 / n)
        collapse = np.zeros(n)
        collapse[0] = 1.0
        assert abs(aux_balance_loss(uniform, uniform, n).item() - 1.0) <= 1e-9
        assert abs(aux_balance_loss(collapse, collapse, n).item() - n) <= 1e-9
    ok(3, "uniform routing -> L_aux = 1, full collapse -> L_aux = N (both to 1e-9)")


# ========================================================================== #
# criterion 4: gradient suite, >= 20 random configurations


def _grad_cfg_rmsnorm(rng):
    d = int(rng.integers(2, 9))
    norm = RMSNorm(d, "n")
    x = Tensor(rng.uniform(-3, 3, (2, d)), requires_grad=True)
    w = rng.uniform(-1, 1, (2, d))
    return lambda p: (norm(x) * Tensor(w)).sum(), [("x", x), ("g", norm.gain)]


def _grad_cfg_rope(rng):
    m, hd = int(rng.integers(1, 6)), int(rng.choice([2, 4, 8]))
    x = Tensor(rng.uniform(-3, 3, (2, m, hd)), requires_grad=True)
    pos = rng.integers(0, 512, m)
    w = rng.uniform(-1, 1, (2, m, hd))
    return lambda p: (rope_apply(x, pos) * Tensor(w)).sum(), [("x", x)]


def _grad_cfg_gqa(rng):
    qh = int(rng.choice([2, 4]))
    kvh = qh if rng.random() < 0.3 else qh // 2  # sometimes degenerate MHA
    d = qh * int(rng.choice([2, 4]))
    attn = GQAttention(np.random.default_rng(int(rng.integers(1 << 30))),
                       d, qh, kvh, 10000.0, 0.0, "a")
    m = int(rng.integers(2, 5))
    x = Tensor(rng.uniform(-2, 2, (1, m, d)), requires_grad=True)
    w = rng.uniform(-1, 1, (1, m, d))
    params = [("x", x)] + list(attn.named_params())
    return lambda p: (attn(x, np.ones(m, dtype=bool)) * Tensor(w)).sum(), params


def _grad_cfg_expert_ffn(rng):
    omega, d = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    layer = SegMoELayer(np.random.default_rng(int(rng.integers(1 << 30))),
                        d, int(rng.integers(2, 8)), int(rng.integers(2, 5)), 1, omega, "m")
    m = int(rng.integers(2, 8))
    tokens = Tensor(rng.uniform(-2, 2, (1, m, d)), requires_grad=True)
    _, d0 = layer(tokens)
    frozen = d0.selected
    w = rng.uniform(-1, 1, (1, m, d))
    params = [("tokens", tokens)] + list(layer.named_params())
    return lambda p: (layer(tokens, frozen_selection=frozen)[0] * Tensor(w)).sum(), params


def _grad_cfg_huber(rng):
    n = int(rng.integers(2, 12))
    x = Tensor(rng.uniform(-3, 3, n), requires_grad=True)
    t = rng.uniform(-3, 3, n)
    delta = float(rng.uniform(0.5, 2.5))
    return lambda p: huber(x, t, delta), [("x", x)]


def _grad_cfg_total_loss(rng):
    cfg = ModelConfig(blocks=1, d_model=4, d_ff=6, q_heads=2, kv_heads=1, experts=3,
                      top_k=1, patch_len=4, h_out=3, look_back=8,
                      omega=int(rng.integers(1, 3)), dropout=0.0, droppath_max=0.0)
    model = Forecaster(cfg, seed=int(rng.integers(1 << 30)))
    x = rng.uniform(-2, 2, (2, 8))
    target = rng.uniform(-2, 2, (2, 3))
    _, ds = model.forward(x)
    frozen = [d.selected for d in ds]

    def f(params):
        pred, ds2 = model.forward(x, frozen_routes=frozen)
        return total_loss(pred, target, ds2, alpha=0.02, delta=2.0).total

    return f, model.named_params()


def test_c04_gradient_suite():
    rng = np.random.default_rng(404)
    makers = (
        [_grad_cfg_rmsnorm] * 5
        + [_grad_cfg_rope] * 4
        + [_grad_cfg_gqa] * 4
        + [_grad_cfg_expert_ffn] * 4
        + [_grad_cfg_huber] * 2
        + [_grad_cfg_total_loss] * 3
    )
    assert len(makers) >= 20
    worst = 0.0
    for i, maker in enumerate(makers):
        f, params = maker(rng)
        report = check_gradients(f, params, step=1e-5, tol=1e-4)
        assert report.ok, f"config {i} ({maker.__name__}): {report.summary()}"
        worst = max(worst, report.max_rel_err)
    ok(4, f"{len(makers)} random configurations, max relative error {worst:.2e} <= 1e-4")


# ========================================================================== #
# criterion 5: Huber anchors and derivative continuity


def test_c05_huber_anchors():
    assert huber(Tensor([1.0]), np.array([0.0]), 2.0).item() == pytest.approx(0.5, abs=1e-12)
    assert huber(Tensor([3.0]), np.array([0.0]), 2.0).item() == pytest.approx(4.0, abs=1e-12)

    def deriv(e, delta=2.0):
        x = Tensor([e], requires_grad=True)
        huber(x, np.array([0.0]), delta).backward()
        return x.grad[0]

    eps = 1e-7
    gap = abs(deriv(2.0 + eps) - deriv(2.0 - eps))
    assert gap < 1e-6
    ok(5, f"e=1 -> 0.5, e=3 -> 4, derivative gap at |e|=delta is {gap:.1e} < 1e-6")


# ========================================================================== #
# criterion 6: padding neutrality


def test_c06_padding_neutrality():
    rng = np.random.default_rng(606)
    checked = 0
    for _ in range(40):
        omega = int(rng.integers(2, 8))
        m = int(rng.integers(2, 30))
        if m % omega == 0:
            m += 1 if (m + 1) % omega else 2
        d = int(rng.integers(2, 5))
        layer = SegMoELayer(np.random.default_rng(int(rng.integers(1 << 30))),
                            d, 6, 3, int(rng.integers(1, 3)), omega, "m")
        tokens = Tensor(rng.normal(size=(2, m, d)))
        clean, _ = layer(tokens)

        seg = segment(tokens, omega)
        assert unsegment(seg.segments, m).data.tobytes() == tokens.data.tobytes()

        junk = seg.segments.data.copy()
        junk[:, ~seg.valid, :] = rng.normal(size=junk[:, ~seg.valid, :].shape) * 1e3
        fuzzed, _ = layer.apply_segments(SegBatch(Tensor(junk), seg.valid, m, omega))
        assert np.array_equal(clean.data, fuzzed.data)
        checked += 1
    ok(6, f"outputs invariant to padded-slot content on {checked} fuzzed (M, omega) cases;"
          " unsegment(segment(x)) == x")


# ========================================================================== #
# criterion 7: rotary relative-position property


def test_c07_rope_relative_position():
    rng = np.random.default_rng(707)
    worst_dot, worst_norm = 0.0, 0.0
    for _ in range(1000):
        hd = int(rng.choice([4, 8, 16, 32]))
        q = rng.normal(size=hd)
        k = rng.normal(size=hd)
        m, n, s = (int(v) for v in rng.integers(0, 4096, 3))
        qm = rope_apply(Tensor(q[None, :]), np.array([m])).data[0]
        kn = rope_apply(Tensor(k[None, :]), np.array([n])).data[0]
        qs = rope_apply(Tensor(q[None, :]), np.array([m + s])).data[0]
        ks = rope_apply(Tensor(k[None, :]), np.array([n + s])).data[0]
        worst_dot = max(worst_dot, abs(np.dot(qm, kn) - np.dot(qs, ks)))
        worst_norm = max(worst_norm,
                         abs(np.linalg.norm(qm) - np.linalg.norm(q)),
                         abs(np.linalg.norm(kn) - np.linalg.norm(k)))
    assert worst_dot < 1e-7
    assert worst_norm < 1e-9
    ok(7, f"1000 draws: max dot-product shift {worst_dot:.1e} < 1e-7,"
          f" max norm drift {worst_norm:.1e} < 1e-9")


# ========================================================================== #
# criteria 8-10: desk-scale experiments on the sines-3ch preset


DESK_MODEL = dict(blocks=2, d_model=64, d_ff=128, q_heads=4, kv_heads=2, experts=4,
                  top_k=1, patch_len=8, h_out=32, look_back=512)
DESK_TRAIN = dict(peak_lr=1e-3, min_lr=1e-4, batch_size=128, patience=5)
DESK_STRIDE = 13
ABLATION_SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def desk_data():
    ds = synth_series(preset("sines-3ch"))
    split = chronological_split(ds, fractions=(0.7, 0.1, 0.2))
    scaled, _, _ = standardize_by_train(ds, split)
    return scaled, split


def desk_run(scaled, split, omega, seed, alpha, epochs):
    m_cfg = ModelConfig(omega=omega, **DESK_MODEL)
    t_cfg = TrainConfig(max_epochs=epochs, min_epochs=epochs, seed=seed, alpha=alpha,
                        **DESK_TRAIN)
    train_plan = make_windows(scaled, split.train, m_cfg.look_back, m_cfg.h_out, DESK_STRIDE)
    val_plan = make_windows(scaled, split.val, m_cfg.look_back, m_cfg.h_out, DESK_STRIDE)
    model = Forecaster(m_cfg, seed=seed)
    result = fit(model, train_plan, val_plan, t_cfg)

    def fc(ctx, h):
        return autoregressive_forecast(model.predict, ctx, h, m_cfg.h_out)

    return model, result, fc


def test_c08_desk_scale_learning(desk_data):
    scaled, split = desk_data
    _, _, fc = desk_run(scaled, split, omega=4, seed=0, alpha=0.02, epochs=10)
    model_report = evaluate(fc, scaled.values, split.test, 512, [96], stride=32)

    def persist(ctx, h):
        return persistence_forecast(ctx, h)

    base_report = evaluate(persist, scaled.values, split.test, 512, [96], stride=32)
    model_mse = model_report.results[0].mse
    base_mse = base_report.results[0].mse
    improvement = 1.0 - model_mse / base_mse
    assert improvement >= 0.30, f"only {improvement:.1%} better than persistence"
    ok(8, f"10-epoch run: MSE@96 {model_mse:.4f} vs persistence {base_mse:.4f}"
          f" ({improvement:.1%} improvement >= 30%)")


@pytest.fixture(scope="module")
def ablation_runs(desk_data):
    """Shared 5-seed sweep: omega in {1, 4} at alpha=0.02 plus alpha=0 runs."""
    scaled, split = desk_data
    out = {"mse": {1: [], 4: []}, "entropy_on": [], "entropy_off": []}
    for seed in ABLATION_SEEDS:
        _, res4, fc4 = desk_run(scaled, split, 4, seed, alpha=0.02, epochs=10)
        rep4 = evaluate(fc4, scaled.values, split.test, 512, [96, 192], stride=32)
        out["mse"][4].append(rep4.avg_mse)
        out["entropy_on"].append(float(np.mean(res4.history[-1].entropy_per_layer)))

        _, res1, fc1 = desk_run(scaled, split, 1, seed, alpha=0.02, epochs=10)
        rep1 = evaluate(fc1, scaled.values, split.test, 512, [96, 192], stride=32)
        out["mse"][1].append(rep1.avg_mse)

        _, res0, _ = desk_run(scaled, split, 4, seed, alpha=0.0, epochs=10)
        out["entropy_off"].append(float(np.mean(res0.history[-1].entropy_per_layer)))
    return out


def test_c09_ablation_directionality(ablation_runs):
    mse4 = ablation_runs["mse"][4]
    mse1 = ablation_runs["mse"][1]
    med4, med1 = statistics.median(mse4), statistics.median(mse1)
    assert med4 <= med1, f"median omega=4 {med4:.4f} > omega=1 {med1:.4f}"
    within = sum(1 for a, b in zip(mse4, mse1) if a <= 1.05 * b)
    assert within >= 4, f"only {within}/5 seeds had omega=4 <= 1.05 * omega=1"
    ok(9, f"median avg-MSE omega=4 {med4:.4f} <= omega=1 {med1:.4f};"
          f" {within}/5 seeds within the 1.05 band")


def test_c10_load_balance_entropy(ablation_runs):
    on = statistics.median(ablation_runs["entropy_on"])
    off = statistics.median(ablation_runs["entropy_off"])
    assert on > off, f"median entropy alpha=0.02 ({on:.3f}) not above alpha=0 ({off:.3f})"
    ok(10, f"median usage entropy {on:.3f} (alpha=0.02) > {off:.3f} (alpha=0) over 5 seeds")


# ========================================================================== #
# criterion 11: parameter accounting


def test_c11_parameter_accounting(tmp_path):
    from segmoe.checkpoint import Checkpoint, save_checkpoint

    cfg = ModelConfig(blocks=2, d_model=16, d_ff=24, q_heads=2, kv_heads=1, experts=3,
                      top_k=1, patch_len=4, h_out=8, look_back=32, omega=[2, 3])
    model = Forecaster(cfg, seed=0)
    report = count_params(cfg)

    # brute-force enumeration over the checkpoint manifest
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(Checkpoint(params=model.param_arrays()), path)
    manifest_total = 0
    with open(path, "rb") as fh:
        for raw in fh:
            line = raw.decode("utf-8", errors="ignore").strip()
            if line.startswith("tensor param/"):
                manifest_total += int(line.split()[-2])
            if line == "end":
                break
    assert report.total == manifest_total

    totals = [count_params(ModelConfig(**{**cfg.__dict__, "omega": w})).total
              for w in (1, 2, 3, 4, 5)]
    assert totals == sorted(totals) and len(set(totals)) == 5

    assert report.activated <= report.total
    dense = count_params(ModelConfig(**{**cfg.__dict__, "top_k": 3}))
    assert dense.activated == dense.total
    sparse_gap = report.total - report.activated
    assert sparse_gap > 0
    ok(11, f"count_params == manifest enumeration ({manifest_total} params);"
           " total strictly grows with omega; activated <= total, equal iff K = N")


# ========================================================================== #
# criterion 12: training determinism through the CLI


def test_c12_train_determinism(tmp_path):
    from segmoe.cli import main

    args = [
        "train", "--synth", "sines-3ch",
        "--blocks", "2", "--d-model", "32", "--d-ff", "64", "--q-heads", "4",
        "--kv-heads", "2", "--experts", "4", "--top-k", "1", "--patch-len", "8",
        "--h-out", "32", "--look-back", "512", "--omega", "4",
        "--max-epochs", "2", "--min-epochs", "1", "--batch-size", "128",
        "--stride", "29", "--seed", "17", "--peak-lr", "1e-3", "--min-lr", "1e-4",
    ]
    out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
    assert main(args + ["--out", out1]) == 0
    assert main(args + ["--out", out2]) == 0
    for name in ("checkpoint.ckpt", "history.csv", "routing_stats.csv", "run_config.txt"):
        b1 = open(os.path.join(out1, name), "rb").read()
        b2 = open(os.path.join(out2, name), "rb").read()
        assert b1 == b2, f"{name} differs between identical runs"
    ok(12, "two identical train invocations produced byte-identical checkpoints and CSVs")
