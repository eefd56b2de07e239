"""Checkpoint serialization: a text manifest header followed by raw
little-endian float64 blobs. The format is deterministic byte-for-byte given
identical contents, which the reproducibility checks rely on."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAGIC = "segmoe-checkpoint 1"


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    opt_m: dict[str, np.ndarray] = field(default_factory=dict)
    opt_v: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    best_val_loss: float = float("inf")
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _named_blobs(ckpt: Checkpoint):
    for name, arr in ckpt.params.items():
        yield f"param/{name}", arr
    for name, arr in ckpt.opt_m.items():
        yield f"opt.m/{name}", arr
    for name, arr in ckpt.opt_v.items():
        yield f"opt.v/{name}", arr


def save_checkpoint(ckpt: Checkpoint, path: str):
    meta = {
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_val_loss": ckpt.best_val_loss,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "extra": ckpt.extra,
    }
    lines = [MAGIC, "meta " + json.dumps(meta, sort_keys=True)]
    blobs: list[bytes] = []
    offset = 0
    for name, arr in _named_blobs(ckpt):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = "x".join(str(s) for s in arr.shape) if arr.ndim else "scalar"
        lines.append(f"tensor {name} {shape} {arr.size} {offset}")
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    end_marker = b"\nend\n"
    cut = raw.find(end_marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}: not a recognizable checkpoint file")
    header = raw[:cut].decode("utf-8").splitlines()
    payload = raw[cut + len(end_marker):]

    meta: dict = {}
    tensors: dict[str, np.ndarray] = {}
    for line in header[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, shape_s, count_s, offset_s = rest.rsplit(" ", 3)
            count, offset = int(count_s), int(offset_s)
            arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).copy()
            if shape_s != "scalar":
                arr = arr.reshape([int(s) for s in shape_s.split("x")])
            tensors[name] = arr
        else:
            raise ValueError(f"{path}: unknown header line {line!r}")

    ckpt = Checkpoint(
        params={},
        epoch=int(meta.get("epoch", 0)),
        step=int(meta.get("step", 0)),
        best_val_loss=float(meta.get("best_val_loss", float("inf"))),
        model_config=meta.get("model_config", {}),
        train_config=meta.get("train_config", {}),
        extra=meta.get("extra", {}),
    )
    for name, arr in tensors.items():
        group, param_name = name.split("/", 1)
        if group == "param":
            ckpt.params[param_name] = arr
        elif group == "opt.m":
            ckpt.opt_m[param_name] = arr
        elif group == "opt.v":
            ckpt.opt_v[param_name] = arr
        else:
            raise ValueError(f"{path}: unknown tensor group {group!r}")
    return ckpt
