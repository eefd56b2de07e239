"""Segment-resolution ablation harness.

Trains one model per omega-schedule variant over a shared seed set and a
shared protocol, then compares average MSE/MAE across horizons. Variants are
independent: each gets its own model and RNG state, so removing one never
changes another's numbers.
"""

from __future__ import annotations

import copy
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .data import Dataset, SplitSpec, make_windows
from .forecasting import autoregressive_forecast, evaluate
from .model import Forecaster
from .trainer import fit

log = logging.getLogger("segmoe")


@dataclass
class VariantResult:
    omega: list[int]
    per_seed_mse: list[float] = field(default_factory=list)
    per_seed_mae: list[float] = field(default_factory=list)
    per_seed_entropy: list[list[float]] = field(default_factory=list)
    failed: bool = False
    error: str = ""

    @property
    def label(self) -> str:
        return "[" + ",".join(str(w) for w in self.omega) + "]"

    @property
    def avg_mse(self) -> float:
        return float(np.mean(self.per_seed_mse)) if self.per_seed_mse else float("nan")

    @property
    def avg_mae(self) -> float:
        return float(np.mean(self.per_seed_mae)) if self.per_seed_mae else float("nan")

    @property
    def median_mse(self) -> float:
        return float(np.median(self.per_seed_mse)) if self.per_seed_mse else float("nan")


@dataclass
class AblationReport:
    variants: list[VariantResult]
    seeds: list[int]
    horizons: list[int]
    protocol: str

    def ranking(self) -> list[int]:
        order = [i for i, v in enumerate(self.variants) if not v.failed]
        return sorted(order, key=lambda i: self.variants[i].avg_mse)


def worker_count(n_variants: int) -> int:
    env = os.environ.get("SEGMOE_THREADS", "1")
    try:
        cap = max(1, int(env))
    except ValueError:
        cap = 1
    return min(cap, n_variants)


def protocol_header(cfg: ModelConfig) -> str:
    return f"P={cfg.patch_len}, d_model={cfg.d_model}, N={cfg.experts}, K={cfg.top_k}"


def _run_variant(omega: list[int], base_model: ModelConfig, base_train: TrainConfig,
                 dataset: Dataset, split: SplitSpec, horizons: list[int],
                 seeds: list[int], stride: int, eval_stride: int) -> VariantResult:
    result = VariantResult(omega=list(omega))
    try:
        for seed in seeds:
            m_cfg = copy.deepcopy(base_model)
            m_cfg.omega = list(omega)
            m_cfg.validate()
            t_cfg = copy.deepcopy(base_train)
            t_cfg.seed = seed
            model = Forecaster(m_cfg, seed=seed)
            train_plan = make_windows(dataset, split.train, m_cfg.look_back, m_cfg.h_out, stride)
            val_plan = make_windows(dataset, split.val, m_cfg.look_back, m_cfg.h_out, stride)
            fit(model, train_plan, val_plan, t_cfg)

            def fc(contexts, horizon):
                return autoregressive_forecast(model.predict, contexts, horizon, m_cfg.h_out)

            report = evaluate(fc, dataset.values, split.test, m_cfg.look_back, horizons, eval_stride)
            result.per_seed_mse.append(report.avg_mse)
            result.per_seed_mae.append(report.avg_mae)
            result.per_seed_entropy.append(model_entropy(model, train_plan, t_cfg.batch_size))
    except Exception as exc:  # a broken variant must not sink the others
        log.exception("ablation variant %s failed", result.label)
        result.failed = True
        result.error = f"{type(exc).__name__}: {exc}"
    return result


def model_entropy(model: Forecaster, plan, batch_size: int) -> list[float]:
    """End-of-training expert usage entropy per layer over one full pass."""
    from .moe import routing_stats
    from .tensor import no_grad

    per_layer: list[list] = [[] for _ in range(model.cfg.blocks)]
    with no_grad():
        for batch in plan.batches(batch_size):
            _, decisions = model.forward(batch.inputs, train=False)
            for i, d in enumerate(decisions):
                per_layer[i].append(d)
    return [routing_stats(ds).entropy for ds in per_layer]


def run_ablation(variants: list[list[int]], base_model: ModelConfig, base_train: TrainConfig,
                 dataset: Dataset, split: SplitSpec, horizons: list[int], seeds: list[int],
                 stride: int = 1, eval_stride: int | None = None) -> AblationReport:
    labels = ["[" + ",".join(str(w) for w in v) + "]" for v in variants]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate ablation variants: {labels}")
    if eval_stride is None:
        eval_stride = base_model.h_out
    workers = worker_count(len(variants))
    args = [(v, base_model, base_train, dataset, split, horizons, seeds, stride, eval_stride)
            for v in variants]
    if workers == 1:
        results = [_run_variant(*a) for a in args]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda a: _run_variant(*a), args))
    return AblationReport(variants=results, seeds=list(seeds), horizons=list(horizons),
                          protocol=protocol_header(base_model))


def ablation_table_text(report: AblationReport) -> str:
    ranking = report.ranking()
    marks = {}
    if ranking:
        marks[ranking[0]] = "best"
    if len(ranking) > 1:
        marks[ranking[1]] = "2nd"
    lines = [
        f"protocol: {report.protocol}",
        f"seeds: {','.join(str(s) for s in report.seeds)}  horizons: {','.join(str(h) for h in report.horizons)}",
        f"{'omega':>16} {'avg MSE':>12} {'avg MAE':>12} {'rank':>6}",
    ]
    for i, v in enumerate(report.variants):
        if v.failed:
            lines.append(f"{v.label:>16} {'failed':>12} {'failed':>12} {'':>6}  # {v.error}")
        else:
            lines.append(f"{v.label:>16} {v.avg_mse:>12.6f} {v.avg_mae:>12.6f} {marks.get(i, ''):>6}")
    return "\n".join(lines)


def ablation_table_csv(report: AblationReport) -> str:
    ranking = report.ranking()
    marks = {}
    if ranking:
        marks[ranking[0]] = "best"
    if len(ranking) > 1:
        marks[ranking[1]] = "2nd"
    lines = ["omega,avg_mse,avg_mae,rank,status,seeds"]
    seeds = ";".join(str(s) for s in report.seeds)
    for i, v in enumerate(report.variants):
        status = "failed" if v.failed else "ok"
        mse = "" if v.failed else repr(v.avg_mse)
        mae = "" if v.failed else repr(v.avg_mae)
        lines.append(f"\"{v.label}\",{mse},{mae},{marks.get(i, '')},{status},\"{seeds}\"")
    return "\n".join(lines) + "\n"
