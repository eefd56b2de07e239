"""Optimization loop: AdamW with decoupled weight decay, linear warmup +
cosine annealing, gradient clipping, early stopping, and deterministic
seeding. Validation runs once per epoch; the best checkpoint is retained."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .config import TrainConfig, config_to_dict
from .data import WindowPlan
from .losses import huber, total_loss
from .model import Forecaster
from .moe import usage_entropy
from .tensor import Tensor, no_grad

log = logging.getLogger("segmoe")

ADAM_EPS = 1e-8


class AdamW:
    """Decoupled weight decay first, then bias-corrected Adam moments."""

    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}
        self.t = 0
        self.skipped = 0

    def step(self, lr: float) -> bool:
        """Apply one update; returns False (and logs) on non-finite gradients."""
        grads = {}
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                self.skipped += 1
                log.warning("adamw: non-finite gradient in %s, step skipped", name)
                return False
            grads[name] = g
        self.t += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        wd = self.cfg.weight_decay
        for name, p in self.params:
            g = grads[name]
            if wd:
                p.data -= lr * wd * p.data
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        return True

    def zero_grads(self):
        for _, p in self.params:
            p.zero_grad()


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> peak over the warmup steps, then cosine decay to min_lr."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(cfg.warmup_frac * total_steps)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if total_steps == warmup:
        return cfg.peak_lr
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm and math.isfinite(norm):
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


# -------------------------------------------------------------------------- #
# history bookkeeping


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    aux_per_layer: list[float]
    entropy_per_layer: list[float]


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list[EpochRecord]
    routing_rows: list[tuple] = field(default_factory=list)  # (epoch, layer, expert, f, r, entropy)
    stopped_epoch: int = 0

    def entropy_per_layer(self) -> list[float]:
        return self.history[-1].entropy_per_layer if self.history else []


HISTORY_HEADER = ["epoch", "train_loss", "val_loss", "lr"]


def history_csv(history: list[EpochRecord], blocks: int) -> str:
    header = HISTORY_HEADER + [f"aux_l{b}" for b in range(blocks)] + [
        f"entropy_l{b}" for b in range(blocks)
    ]
    lines = [",".join(header)]
    for rec in history:
        cells = [str(rec.epoch), repr(float(rec.train_loss)), repr(float(rec.val_loss)), repr(float(rec.lr))]
        cells += [repr(float(a)) for a in rec.aux_per_layer]
        cells += [repr(float(e)) for e in rec.entropy_per_layer]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def routing_csv(rows: list[tuple]) -> str:
    lines = ["epoch,layer,expert,f,r,entropy"]
    for epoch, layer, expert, f, r, ent in rows:
        lines.append(f"{epoch},{layer},{expert},{float(f)!r},{float(r)!r},{float(ent)!r}")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------------- #
# fitting


def validation_loss(model: Forecaster, plan: WindowPlan, delta: float, batch_size: int) -> float:
    """Mean Huber prediction loss over the plan, eval mode, fixed order."""
    total_val = 0.0
    count = 0
    with no_grad():
        for batch in plan.batches(batch_size):
            pred, _ = model.forward(batch.inputs, train=False)
            loss = huber(pred, batch.targets, delta)
            total_val += float(loss.data) * len(batch)
            count += len(batch)
    if count == 0:
        raise ValueError("validation stream is empty")
    return total_val / count


def _snapshot(model: Forecaster, opt: AdamW) -> tuple[dict, dict, dict]:
    params = {name: t.data.copy() for name, t in model.named_params()}
    return params, {k: v.copy() for k, v in opt.m.items()}, {k: v.copy() for k, v in opt.v.items()}


def fit(model: Forecaster, train_plan: WindowPlan, val_plan: WindowPlan,
        cfg: TrainConfig) -> FitResult:
    """Train until early stopping or max_epochs; returns the best checkpoint.

    Deterministic for a fixed seed: batch order, dropout, and stochastic depth
    all derive from the run seed.
    """
    cfg.validate()
    if len(train_plan) == 0:
        raise ValueError("training stream is empty")
    if len(val_plan) == 0:
        raise ValueError("validation stream is empty")

    seq = np.random.SeedSequence(cfg.seed)
    data_rng, drop_rng = (np.random.default_rng(s) for s in seq.spawn(2))

    params = model.named_params()
    opt = AdamW(params, cfg)
    steps_per_epoch = math.ceil(len(train_plan) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.max_epochs

    best_val = math.inf
    best_state: tuple[dict, dict, dict] | None = None
    best_epoch = 0
    epochs_since_best = 0
    history: list[EpochRecord] = []
    routing_rows: list[tuple] = []
    step = 0

    for epoch in range(1, cfg.max_epochs + 1):
        epoch_loss = 0.0
        epoch_aux = None
        n_batches = 0
        any_finite = False
        layer_counts = None
        layer_scores = None
        layer_segments = None
        lr = lr_at(step, total_steps, cfg)

        for batch in train_plan.batches(cfg.batch_size, shuffle_rng=data_rng):
            lr = lr_at(step, total_steps, cfg)
            opt.zero_grads()
            pred, decisions = model.forward(batch.inputs, train=True, rng=drop_rng)
            report = total_loss(pred, batch.targets, decisions, cfg.alpha, cfg.delta,
                                expected_layers=model.cfg.blocks)
            if math.isfinite(report.total_value):
                any_finite = True
                report.total.backward()
                clip_global_norm(params, cfg.clip_norm)
                opt.step(lr)
            else:
                log.warning("epoch %d: non-finite training loss, batch skipped", epoch)
            step += 1

            epoch_loss += report.total_value
            aux = np.array(report.aux_per_layer)
            epoch_aux = aux if epoch_aux is None else epoch_aux + aux
            n_batches += 1
            if layer_counts is None:
                layer_counts = [d.counts.astype(np.float64).copy() for d in decisions]
                layer_scores = [d.scores.data.sum(axis=0) for d in decisions]
                layer_segments = [d.n_segments for d in decisions]
            else:
                for i, d in enumerate(decisions):
                    layer_counts[i] += d.counts
                    layer_scores[i] += d.scores.data.sum(axis=0)
                    layer_segments[i] += d.n_segments

        if not any_finite:
            raise RuntimeError(
                f"epoch {epoch}: every training batch produced a non-finite loss; aborting"
            )

        val = validation_loss(model, val_plan, cfg.delta, cfg.batch_size)
        entropies = []
        k = model.cfg.top_k
        for layer, (counts, scores) in enumerate(zip(layer_counts, layer_scores)):
            f = counts / (k * layer_segments[layer])
            r = scores / layer_segments[layer]
            ent = usage_entropy(f)
            entropies.append(ent)
            for expert in range(model.cfg.experts):
                routing_rows.append((epoch, layer, expert, f[expert], r[expert], ent))
        history.append(EpochRecord(
            epoch=epoch,
            train_loss=epoch_loss / n_batches,
            val_loss=val,
            lr=lr,
            aux_per_layer=list(epoch_aux / n_batches),
            entropy_per_layer=entropies,
        ))
        log.info("epoch %d: train=%.6f val=%.6f lr=%.3e", epoch, epoch_loss / n_batches, val, lr)

        if val < best_val:
            best_val = val
            best_state = _snapshot(model, opt)
            best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience and epoch >= cfg.min_epochs:
                log.info("early stop after epoch %d (best epoch %d)", epoch, best_epoch)
                break

    if best_state is None:
        raise RuntimeError("training never produced a finite validation loss")
    best_params, best_m, best_v = best_state
    model.load_param_arrays(best_params)
    ckpt = Checkpoint(
        params=best_params,
        opt_m=best_m,
        opt_v=best_v,
        epoch=best_epoch,
        step=step,
        best_val_loss=best_val,
        model_config=config_to_dict(model.cfg),
        train_config=config_to_dict(cfg),
    )
    return FitResult(checkpoint=ckpt, history=history, routing_rows=routing_rows,
                     stopped_epoch=history[-1].epoch)
