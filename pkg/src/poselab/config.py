"""Run configuration: one flat record of every tunable, hashed for artifacts.

A run is fully described by a RunConfig; its sha256 digest is stored in
every checkpoint and report so stale artifact mixes are caught early.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .models import COMBINE_MODES
from .refine import REFINE_MODES
from .scene import POSE_MODES
from .serial import canonical_dumps, read_json


@dataclass(frozen=True)
class RunConfig:
    name: str = "default"
    out_root: str = "runs"
    seed: int = 0
    # scene and dataset (train/test counts are per scene)
    n_scenes: int = 1
    extent: float = 10.0
    n_landmarks: int = 8
    focal: float = 28.0
    point_radius: float | None = 3.0
    pose_mode: str = "orbit-shell"
    resolution: int = 32
    n_train: int = 400
    n_test: int = 100
    # shared model sizes
    d: int = 64
    levels: int = 2
    batch_size: int = 32
    # teacher regressor
    apr_epochs: int = 600
    apr_lr: float = 1e-3
    apr_lr_decay: float = 0.05
    s_x_init: float = -2.0
    s_q_init: float = -3.0
    # pose auto-encoder
    pae_epochs: int = 600
    pae_lr: float = 1e-3
    pae_lr_decay: float = 0.05
    pae_latent_weight: float = 30.0
    # image decoder
    decoder_epochs: int = 60
    decoder_lr: float = 1e-2
    decoder_lr_decay: float = 1.0
    decoder_combine: str = "sum"
    # relative regressor
    rpr_epochs: int = 60
    rpr_lr: float = 1e-3
    rpr_lr_decay: float = 1.0
    # test-time refinement
    k: int = 3
    outer: int = 3
    inner: int = 100
    refine_lr: float = 1e-3
    refine_weight_decay: float = 1e-2
    refine_mode: str = "iterative"
    sigma_frac: float = 0.1
    trials: int = 100
    orient_jitter_deg: float = 10.0

    def __post_init__(self):
        if not self.name or "/" in self.name:
            raise ValueError(f"run name must be a plain directory name, got {self.name!r}")
        if self.n_scenes < 1:
            raise ValueError(f"need at least one scene, got {self.n_scenes}")
        if self.extent <= 0.0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        if self.n_train < self.k:
            raise ValueError(
                f"n_train={self.n_train} cannot support k={self.k} neighbors")
        if self.n_test < 1:
            raise ValueError(f"need test samples, got {self.n_test}")
        if self.pose_mode not in POSE_MODES:
            raise ValueError(f"pose_mode must be one of {POSE_MODES}")
        if self.decoder_combine not in COMBINE_MODES:
            raise ValueError(f"decoder_combine must be one of {COMBINE_MODES}")
        if self.refine_mode not in REFINE_MODES:
            raise ValueError(f"refine_mode must be one of {REFINE_MODES}")
        if self.levels < 0:
            raise ValueError(f"levels must be >= 0, got {self.levels}")
        if self.pae_latent_weight <= 0.0:
            raise ValueError(
                f"pae_latent_weight must be positive, got {self.pae_latent_weight}")
        if self.sigma_frac <= 0.0:
            raise ValueError(f"sigma_frac must be positive, got {self.sigma_frac}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        for field in ("apr_lr_decay", "pae_lr_decay", "decoder_lr_decay",
                      "rpr_lr_decay"):
            decay = getattr(self, field)
            if not 0.0 < decay <= 1.0:
                raise ValueError(f"{field} must be in (0, 1], got {decay}")

    def run_dir(self) -> Path:
        return Path(self.out_root) / self.name

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    """Parse a raw JSON value or --set string into the field's type."""
    field = _FIELDS[name]
    if isinstance(value, str):
        text = value.strip()
        if field.type in ("float | None", "Optional[float]"):
            if text.lower() in ("none", "null", ""):
                return None
            return float(text)
        if field.type == "int":
            return int(text)
        if field.type == "float":
            return float(text)
        return text
    if field.type == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"config key {name!r} needs an integer, got {value!r}")
        return value
    if field.type == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"config key {name!r} needs a number, got {value!r}")
        return float(value)
    if field.type in ("float | None", "Optional[float]"):
        return None if value is None else float(value)
    return value


def config_from_dict(raw: dict) -> RunConfig:
    unknown = sorted(set(raw) - set(_FIELDS))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**{k: _coerce(k, v) for k, v in raw.items()})


def load_config(path) -> RunConfig:
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, assignments) -> RunConfig:
    """Apply --set key=value pairs on top of a config."""
    updates = {}
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not of the form key=value")
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, value)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def config_digest(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_dumps(cfg.as_dict()).encode()).hexdigest()
