"""Model and training configuration with upfront validation.

Every run validates its full configuration before any tensor is allocated;
violations raise ConfigError with the offending field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture schedule. Defaults match the small backbone setting."""

    blocks: int = 4
    d_model: int = 128
    d_ff: int = 256
    q_heads: int = 4
    kv_heads: int = 2
    experts: int = 4
    top_k: int = 1
    patch_len: int = 8
    h_out: int = 32
    look_back: int = 512
    omega: int | list[int] = 4
    dropout: float = 0.2
    droppath_max: float = 0.3
    rope_base: float = 10000.0
    head_mode: str = "flatten"  # or "last": forecast from the final token only
    tiled_attention: bool = False

    def validate(self) -> "ModelConfig":
        _positive(self, "blocks", "d_model", "d_ff", "q_heads", "kv_heads",
                  "experts", "top_k", "patch_len", "h_out", "look_back")
        if self.q_heads % self.kv_heads != 0:
            raise ConfigError(f"q_heads ({self.q_heads}) must be a multiple of kv_heads ({self.kv_heads})")
        if self.d_model % self.q_heads != 0:
            raise ConfigError(f"d_model ({self.d_model}) must be divisible by q_heads ({self.q_heads})")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head dimension ({self.head_dim}) must be even for rotary embeddings")
        if self.top_k > self.experts:
            raise ConfigError(f"top_k ({self.top_k}) must not exceed experts ({self.experts})")
        try:
            schedule = self.omega_schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for i, w in enumerate(schedule):
            if w < 1:
                raise ConfigError(f"omega[{i}] must be >= 1, got {w}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.droppath_max < 1.0:
            raise ConfigError(f"droppath_max must be in [0, 1), got {self.droppath_max}")
        if self.rope_base <= 1.0:
            raise ConfigError(f"rope_base must be > 1, got {self.rope_base}")
        if self.head_mode not in ("flatten", "last"):
            raise ConfigError(f"head_mode must be 'flatten' or 'last', got {self.head_mode!r}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d_model // self.q_heads

    @property
    def n_patches(self) -> int:
        return -(-self.look_back // self.patch_len)

    def omega_schedule(self) -> list[int]:
        from .moe import multi_resolution_schedule

        return multi_resolution_schedule(self.omega, self.blocks)


@dataclass
class TrainConfig:
    """Optimization recipe: AdamW + linear warmup + cosine annealing."""

    peak_lr: float = 3.2e-4
    min_lr: float = 1.2e-5
    warmup_frac: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    batch_size: int = 64
    max_epochs: int = 30
    min_epochs: int = 10
    patience: int = 5
    alpha: float = 0.02
    delta: float = 2.0
    seed: int = 0
    clip_norm: float = 1.0

    def validate(self) -> "TrainConfig":
        if not 0.0 < self.min_lr <= self.peak_lr:
            raise ConfigError(f"need 0 < min_lr <= peak_lr, got min_lr={self.min_lr}, peak_lr={self.peak_lr}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        _positive(self, "batch_size", "max_epochs")
        if self.min_epochs < 1 or self.min_epochs > self.max_epochs:
            raise ConfigError(
                f"need 1 <= min_epochs <= max_epochs, got {self.min_epochs}/{self.max_epochs}"
            )
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if self.weight_decay < 0 or self.alpha < 0:
            raise ConfigError("weight_decay and alpha must be non-negative")
        if self.delta <= 0:
            raise ConfigError(f"delta must be > 0, got {self.delta}")
        return self


def _positive(cfg, *names: str):
    for name in names:
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1, got {getattr(cfg, name)}")


# -------------------------------------------------------------------------- #
# key=value config files


def parse_config_file(path: str) -> dict[str, str]:
    """Read `key = value` lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    try:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
                key, value = line.split("=", 1)
                out[key.strip()] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return out


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _coerce(field_obj: dataclasses.Field, raw: str):
    ftype = field_obj.type
    if "list" in str(ftype) or field_obj.name == "omega":
        parts = [p for p in raw.replace(",", " ").split() if p]
        vals = [int(p) for p in parts]
        return vals[0] if len(vals) == 1 and field_obj.name == "omega" else vals
    if ftype in ("int", int):
        return int(raw)
    if ftype in ("float", float):
        return float(raw)
    if ftype in ("bool", bool):
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ConfigError(f"{field_obj.name}: expected a boolean, got {raw!r}") from None
    return raw


def apply_overrides(cfg, overrides: dict[str, str], used: set[str] | None = None):
    """Set matching dataclass fields from string values, with type coercion."""
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    for key, raw in overrides.items():
        if key not in fields:
            continue
        try:
            setattr(cfg, key, _coerce(fields[key], raw))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        if used is not None:
            used.add(key)
    return cfg


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d).validate()


def train_config_from_dict(d: dict) -> TrainConfig:
    return TrainConfig(**d).validate()
