"""One-for-all autoregressive inference and the evaluation harness.

A single model trained with a fixed output length H_o reaches any horizon H
by ceil(H / H_o) iterations: each step re-z-scores the rolled look-back,
predicts H_o values, inverts the step's statistics, and appends. Metrics are
reported per horizon on the (globally standardized) data scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import STD_FLOOR
from .losses import mse_mae

# predicts (n, H_o) normalized values from (n, L) normalized look-backs
PredictFn = Callable[[np.ndarray], np.ndarray]


def autoregressive_forecast(predict: PredictFn, context: np.ndarray, horizon: int,
                            h_out: int) -> np.ndarray:
    """Roll (n, L) contexts forward to exactly `horizon` steps.

    Instance statistics are recomputed on every iteration's window, keeping
    the model's input distribution stationary across steps.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    single = context.ndim == 1
    window = np.atleast_2d(np.asarray(context, dtype=np.float64)).copy()
    L = window.shape[1]
    out = np.empty((window.shape[0], 0))
    for _ in range(-(-horizon // h_out)):
        means = window.mean(axis=1, keepdims=True)
        stds = window.std(axis=1, keepdims=True)
        stds = np.where(stds < STD_FLOOR, 1.0, stds)
        pred = predict((window - means) / stds) * stds + means
        out = np.concatenate([out, pred], axis=1)
        window = np.concatenate([window, pred], axis=1)[:, -L:]
    out = out[:, :horizon]
    return out[0] if single else out


def persistence_forecast(context: np.ndarray, horizon: int) -> np.ndarray:
    """Naive baseline: repeat the last observed value across the horizon."""
    context = np.atleast_2d(np.asarray(context, dtype=np.float64))
    return np.repeat(context[:, -1:], horizon, axis=1)


def model_predictor(model) -> PredictFn:
    return model.predict


def model_call_count(predict: PredictFn) -> PredictFn:
    """Wrap a predictor so tests can count model invocations."""
    calls = [0]

    def wrapped(x):
        calls[0] += 1
        return predict(x)

    wrapped.calls = calls
    return wrapped


# -------------------------------------------------------------------------- #
# evaluation


@dataclass
class HorizonResult:
    horizon: int
    mse: float
    mae: float
    n_windows: int
    skipped: bool = False


@dataclass
class EvalReport:
    results: list[HorizonResult]
    avg_mse: float
    avg_mae: float

    def rows(self) -> list[tuple]:
        out = [(str(r.horizon), r.mse, r.mae, r.n_windows, r.skipped) for r in self.results]
        out.append(("Avg.", self.avg_mse, self.avg_mae, sum(r.n_windows for r in self.results), False))
        return out


def eval_window_starts(range_len: int, L: int, horizon: int, stride: int) -> np.ndarray:
    last = range_len - L - horizon
    if last < 0:
        return np.arange(0)
    return np.arange(0, last + 1, stride, dtype=np.int64)


def evaluate(forecast: Callable[[np.ndarray, int], np.ndarray], values: np.ndarray,
             test_range: tuple[int, int], L: int, horizons: list[int],
             stride: int) -> EvalReport:
    """Per-horizon MSE/MAE plus an average row.

    `forecast(contexts, H)` maps (n, L) raw contexts to (n, H) predictions.
    Metrics are averaged per variable first, then across variables; horizons
    the test range cannot cover are skipped with a warning flag.
    """
    start, end = test_range
    span = end - start
    D = values.shape[1]
    results = []
    for horizon in horizons:
        starts = eval_window_starts(span, L, horizon, stride)
        if starts.size == 0:
            results.append(HorizonResult(horizon, float("nan"), float("nan"), 0, skipped=True))
            continue
        per_var_mse = np.zeros(D)
        per_var_mae = np.zeros(D)
        for ch in range(D):
            t_in = start + starts[:, None] + np.arange(L)[None, :]
            t_out = start + starts[:, None] + L + np.arange(horizon)[None, :]
            contexts = values[t_in, ch]
            truths = values[t_out, ch]
            preds = forecast(contexts, horizon)
            window_mse = []
            window_mae = []
            for p, t in zip(preds, truths):
                m, a = mse_mae(p, t)
                window_mse.append(m)
                window_mae.append(a)
            per_var_mse[ch] = float(np.mean(window_mse))
            per_var_mae[ch] = float(np.mean(window_mae))
        results.append(HorizonResult(horizon, float(per_var_mse.mean()),
                                     float(per_var_mae.mean()), int(starts.size * D)))
    scored = [r for r in results if not r.skipped]
    if scored:
        avg_mse = float(np.mean([r.mse for r in scored]))
        avg_mae = float(np.mean([r.mae for r in scored]))
    else:
        avg_mse = avg_mae = float("nan")
    return EvalReport(results=results, avg_mse=avg_mse, avg_mae=avg_mae)


def metric_table_text(report: EvalReport) -> str:
    lines = [f"{'horizon':>8} {'MSE':>12} {'MAE':>12} {'windows':>8}"]
    for name, mse, mae, n, skipped in report.rows():
        if skipped:
            lines.append(f"{name:>8} {'skipped':>12} {'skipped':>12} {n:>8}")
        else:
            lines.append(f"{name:>8} {mse:>12.6f} {mae:>12.6f} {n:>8}")
    return "\n".join(lines)


def metric_table_csv(report: EvalReport) -> str:
    lines = ["horizon,mse,mae,windows,skipped"]
    for name, mse, mae, n, skipped in report.rows():
        lines.append(f"{name},{mse!r},{mae!r},{n},{int(skipped)}")
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------------------- #
# forecast export


@dataclass
class ForecastExport:
    rows: list[tuple]  # (t, context, truth, prediction) with None for NA
    channel: int
    start: int

    def to_csv(self) -> str:
        lines = ["t,context,truth,prediction"]
        for t, ctx, truth, pred in self.rows:
            cells = [str(t)]
            for v in (ctx, truth, pred):
                cells.append("NA" if v is None else repr(float(v)))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def export_forecast(forecast: Callable[[np.ndarray, int], np.ndarray], values: np.ndarray,
                    test_range: tuple[int, int], L: int, horizon: int, window_index: int,
                    stride: int, context_rows: int | None = None) -> ForecastExport:
    """Dump one window's look-back tail, ground truth, and prediction.

    The truth column carries the dataset slice untouched over both the context
    tail and the horizon; plotting is left to external tools.
    """
    start, end = test_range
    span = end - start
    starts = eval_window_starts(span, L, horizon, stride)
    D = values.shape[1]
    total = int(starts.size * D)
    if not 0 <= window_index < total:
        raise IndexError(f"window index {window_index} out of range [0, {total})")
    channel, pos = divmod(window_index, starts.size)
    s = start + int(starts[pos])
    context = values[s : s + L, channel]
    truth = values[s + L : s + L + horizon, channel]
    pred = forecast(context[None, :], horizon)[0]
    tail = L if context_rows is None else min(context_rows, L)
    rows: list[tuple] = []
    for i in range(L - tail, L):
        rows.append((s + i, context[i], context[i], None))
    for i in range(horizon):
        rows.append((s + L + i, None, truth[i], pred[i]))
    return ForecastExport(rows=rows, channel=channel, start=s)
