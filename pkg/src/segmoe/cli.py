"""Command-line surface: train, eval, forecast, ablate, params, synth.

Exit codes: 0 success, 1 configuration/validation error, 2 runtime failure.
Every command validates its full configuration before any model memory is
allocated. SEGMOE_THREADS caps ablation worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import ablation, forecasting
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import (ConfigError, ModelConfig, TrainConfig, apply_overrides,
                     config_to_dict, parse_config_file)
from .data import (DataError, Dataset, SynthSpec, chronological_split, load_csv,
                   make_windows, preset, save_csv, standardize_by_train, synth_series,
                   validate_task)
from .model import Forecaster, count_params
from .trainer import fit, history_csv, routing_csv

log = logging.getLogger("segmoe")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; bad flags are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _int_list(raw: str) -> list[int]:
    try:
        return [int(p) for p in raw.replace(";", ",").split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {raw!r}") from None


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", help="CSV dataset path (header row; optional leading date/timestamp column)")
    p.add_argument("--synth", help="named synthetic preset (e.g. sines-3ch) or 'custom'")
    p.add_argument("--synth-channels", type=int, default=3)
    p.add_argument("--synth-length", type=int, default=4096)
    p.add_argument("--synth-sines", default="1.0:24:0.0",
                   help="per-channel sine sets, channels split by ';', sines by '+', fields amp:period:phase")
    p.add_argument("--synth-trend", type=float, default=0.0)
    p.add_argument("--synth-noise", type=float, default=0.0)
    p.add_argument("--synth-seed", type=int, default=0)
    p.add_argument("--split", default="0.7,0.1,0.2",
                   help="train/val/test fractions, or explicit sizes with --split-sizes")
    p.add_argument("--split-sizes", help="explicit train,val,test sizes (e.g. 8545,2881,2881)")


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key-value config file; flags override file values")
    p.add_argument("--blocks", type=int)
    p.add_argument("--d-model", type=int, dest="d_model")
    p.add_argument("--d-ff", type=int, dest="d_ff")
    p.add_argument("--q-heads", type=int, dest="q_heads")
    p.add_argument("--kv-heads", type=int, dest="kv_heads")
    p.add_argument("--experts", type=int)
    p.add_argument("--top-k", type=int, dest="top_k")
    p.add_argument("--omega", help="segment length: scalar or per-block comma list")
    p.add_argument("--patch-len", type=int, dest="patch_len")
    p.add_argument("--h-out", type=int, dest="h_out")
    p.add_argument("--look-back", type=int, dest="look_back")
    p.add_argument("--dropout", type=float)
    p.add_argument("--droppath-max", type=float, dest="droppath_max")
    p.add_argument("--head-mode", dest="head_mode", choices=["flatten", "last"])


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int)
    p.add_argument("--peak-lr", type=float, dest="peak_lr")
    p.add_argument("--min-lr", type=float, dest="min_lr")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--min-epochs", type=int, dest="min_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--stride", type=int, default=1, help="training window stride")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="segmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write checkpoint + history")
    _add_data_flags(p_train)
    _add_model_flags(p_train)
    _add_train_flags(p_train)
    p_train.add_argument("--out", required=True, help="output directory")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint over forecast horizons")
    _add_data_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--horizons", default="96,192,336,720")
    p_eval.add_argument("--eval-stride", type=int, dest="eval_stride",
                        help="window stride for evaluation (default: model h_out)")
    p_eval.add_argument("--out", help="directory for metrics.csv (optional)")

    p_fc = sub.add_parser("forecast", help="export one window's forecast as CSV")
    _add_data_flags(p_fc)
    p_fc.add_argument("--checkpoint", required=True)
    p_fc.add_argument("--window", type=int, default=0, help="index into the test window enumeration")
    p_fc.add_argument("--horizon", type=int, default=96)
    p_fc.add_argument("--eval-stride", type=int, dest="eval_stride")
    p_fc.add_argument("--context-rows", type=int, dest="context_rows")
    p_fc.add_argument("--out", required=True, help="output CSV path")

    p_abl = sub.add_parser("ablate", help="compare omega-schedule variants under one protocol")
    _add_data_flags(p_abl)
    _add_model_flags(p_abl)
    _add_train_flags(p_abl)
    p_abl.add_argument("--variants", required=True,
                       help="omega variants separated by ';', each scalar or comma list")
    p_abl.add_argument("--seeds", default="0,1,2,3,4")
    p_abl.add_argument("--horizons", default="96,192,336,720")
    p_abl.add_argument("--eval-stride", type=int, dest="eval_stride")
    p_abl.add_argument("--out", help="directory for ablation.csv (optional)")

    p_par = sub.add_parser("params", help="activated/total parameter counts per layer")
    _add_model_flags(p_par)

    p_syn = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    _add_data_flags(p_syn)
    p_syn.add_argument("--out", required=True, help="output CSV path")

    return parser


# -------------------------------------------------------------------------- #
# shared assembly


def parse_sines(raw: str) -> list[list[tuple[float, float, float]]]:
    channels = []
    for chan_part in raw.split(";"):
        sines = []
        for sine in chan_part.split("+"):
            fields = sine.split(":")
            if len(fields) != 3:
                raise ConfigError(f"bad sine spec {sine!r}: expected amp:period:phase")
            try:
                amp, period, phase = (float(f) for f in fields)
            except ValueError:
                raise ConfigError(f"bad sine spec {sine!r}: non-numeric field") from None
            sines.append((amp, period, phase))
        channels.append(sines)
    return channels


def synth_spec_from_args(args) -> SynthSpec:
    if args.synth and args.synth != "custom":
        return preset(args.synth)
    return SynthSpec(
        channels=args.synth_channels,
        length=args.synth_length,
        sines=parse_sines(args.synth_sines),
        trend=args.synth_trend,
        noise_sigma=args.synth_noise,
        seed=args.synth_seed,
        name="custom",
    )


def resolve_dataset(args) -> tuple[Dataset, dict]:
    if args.data and args.synth:
        raise ConfigError("give either --data or --synth, not both")
    if args.data:
        return load_csv(args.data), {"source": "csv", "path": args.data}
    if args.synth:
        spec = synth_spec_from_args(args)
        return synth_series(spec), {"source": "synth", "spec": dataclasses.asdict(spec)}
    raise ConfigError("no dataset: give --data <csv> or --synth <preset>")


def resolve_split(args, dataset: Dataset):
    if args.split_sizes:
        sizes = _int_list(args.split_sizes)
        if len(sizes) != 3:
            raise ConfigError(f"--split-sizes needs three values, got {args.split_sizes!r}")
        return chronological_split(dataset, sizes=tuple(sizes))
    try:
        fractions = tuple(float(p) for p in args.split.split(","))
    except ValueError:
        raise ConfigError(f"bad --split {args.split!r}") from None
    if len(fractions) != 3:
        raise ConfigError(f"--split needs three fractions, got {args.split!r}")
    return chronological_split(dataset, fractions=fractions)


def _flag_overrides(args, cfg) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(args, f.name, None)
        if value is not None:
            out[f.name] = value if isinstance(value, str) else repr(value)
    return out


def build_configs(args) -> tuple[ModelConfig, TrainConfig]:
    m_cfg = ModelConfig()
    t_cfg = TrainConfig()
    if getattr(args, "config", None):
        file_kv = parse_config_file(args.config)
        used: set[str] = set()
        apply_overrides(m_cfg, file_kv, used)
        apply_overrides(t_cfg, file_kv, used)
        unknown = set(file_kv) - used
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    apply_overrides(m_cfg, _flag_overrides(args, m_cfg))
    apply_overrides(t_cfg, _flag_overrides(args, t_cfg))
    m_cfg.validate()
    t_cfg.validate()
    return m_cfg, t_cfg


def prepared_data(args, look_back: int, h_out: int):
    dataset, descriptor = resolve_dataset(args)
    split = resolve_split(args, dataset)
    validate_task(dataset, look_back, h_out)
    scaled, mean, std = standardize_by_train(dataset, split)
    return scaled, split, descriptor


def model_from_checkpoint(path: str) -> tuple[Forecaster, Checkpoint]:
    try:
        ckpt = load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    m_cfg = ModelConfig(**ckpt.model_config).validate()
    model = Forecaster(m_cfg, seed=int(ckpt.train_config.get("seed", 0)))
    model.load_param_arrays(ckpt.params)
    return model, ckpt


def forecaster_fn(model: Forecaster):
    def fc(contexts, horizon):
        return forecasting.autoregressive_forecast(model.predict, contexts, horizon,
                                                   model.cfg.h_out)
    return fc


# -------------------------------------------------------------------------- #
# commands


def cmd_train(args) -> int:
    m_cfg, t_cfg = build_configs(args)
    scaled, split, descriptor = prepared_data(args, m_cfg.look_back, m_cfg.h_out)
    train_plan = make_windows(scaled, split.train, m_cfg.look_back, m_cfg.h_out, args.stride)
    val_plan = make_windows(scaled, split.val, m_cfg.look_back, m_cfg.h_out, args.stride)
    if train_plan.warning or val_plan.warning:
        raise DataError("train or validation range too short for the configured windows")

    model = Forecaster(m_cfg, seed=t_cfg.seed)
    result = fit(model, train_plan, val_plan, t_cfg)
    result.checkpoint.extra = {"data": descriptor, "stride": args.stride,
                               "split": [list(split.train), list(split.val), list(split.test)]}

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(result.checkpoint, os.path.join(args.out, "checkpoint.ckpt"))
    with open(os.path.join(args.out, "history.csv"), "w") as fh:
        fh.write(history_csv(result.history, m_cfg.blocks))
    with open(os.path.join(args.out, "routing_stats.csv"), "w") as fh:
        fh.write(routing_csv(result.routing_rows))
    with open(os.path.join(args.out, "run_config.txt"), "w") as fh:
        fh.write(json.dumps({"model": config_to_dict(m_cfg), "train": config_to_dict(t_cfg),
                             "data": descriptor}, sort_keys=True, indent=2) + "\n")
    print(f"best epoch {result.checkpoint.epoch}: val_loss={result.checkpoint.best_val_loss!r}")
    print(f"wrote {args.out}/checkpoint.ckpt, history.csv, routing_stats.csv")
    return 0


def cmd_eval(args) -> int:
    model, ckpt = model_from_checkpoint(args.checkpoint)
    horizons = _int_list(args.horizons)
    if not horizons or any(h < 1 for h in horizons):
        raise ConfigError(f"horizons must all be >= 1, got {args.horizons!r}")
    scaled, split, _ = prepared_data(args, model.cfg.look_back, min(horizons))
    stride = args.eval_stride or model.cfg.h_out
    report = forecasting.evaluate(forecaster_fn(model), scaled.values, split.test,
                                  model.cfg.look_back, horizons, stride)
    for r in report.results:
        if r.skipped:
            log.warning("horizon %d skipped: test range too short", r.horizon)
    print(forecasting.metric_table_text(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
            fh.write(forecasting.metric_table_csv(report))
    return 0


def cmd_forecast(args) -> int:
    model, _ = model_from_checkpoint(args.checkpoint)
    if args.horizon < 1:
        raise ConfigError(f"horizon must be >= 1, got {args.horizon}")
    scaled, split, _ = prepared_data(args, model.cfg.look_back, args.horizon)
    stride = args.eval_stride or model.cfg.h_out
    export = forecasting.export_forecast(
        forecaster_fn(model), scaled.values, split.test, model.cfg.look_back,
        args.horizon, args.window, stride, args.context_rows)
    with open(args.out, "w") as fh:
        fh.write(export.to_csv())
    print(f"wrote {args.out} (channel {export.channel}, context start {export.start})")
    return 0


def cmd_ablate(args) -> int:
    m_cfg, t_cfg = build_configs(args)
    variants = [_int_list(v) for v in args.variants.split(";") if v.strip()]
    if not variants:
        raise ConfigError("no ablation variants given")
    variants = [v if len(v) > 1 else v * m_cfg.blocks for v in variants]
    labels = [tuple(v) for v in variants]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"duplicate ablation variants: {args.variants!r}")
    seeds = _int_list(args.seeds)
    horizons = _int_list(args.horizons)
    scaled, split, _ = prepared_data(args, m_cfg.look_back, m_cfg.h_out)
    print(f"ablation protocol: {ablation.protocol_header(m_cfg)}")
    report = ablation.run_ablation(variants, m_cfg, t_cfg, scaled, split, horizons,
                                   seeds, args.stride, args.eval_stride)
    print(ablation.ablation_table_text(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
            fh.write(ablation.ablation_table_csv(report))
    return 0


def cmd_params(args) -> int:
    m_cfg, _ = build_configs(args)
    report = count_params(m_cfg)
    print(f"{'layer':>20} {'activated':>12} {'total':>12}")
    for name, activated, total in report.rows():
        print(f"{name:>20} {activated:>12} {total:>12}")
    return 0


def cmd_synth(args) -> int:
    if not args.synth:
        args.synth = "custom"
    spec = synth_spec_from_args(args)
    dataset = synth_series(spec)
    save_csv(dataset, args.out)
    print(f"wrote {args.out}: T={dataset.T}, D={dataset.D} (seed {spec.seed})")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "forecast": cmd_forecast,
    "ablate": cmd_ablate,
    "params": cmd_params,
    "synth": cmd_synth,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
