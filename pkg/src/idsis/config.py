"""Run configuration: documented defaults, config-file parsing, overrides.

The config file is flat key-value text (YAML mapping / JSON object). Flags
override file values; the IDSIS_SEED environment variable overrides the
training seed last. Unknown keys are rejected with a suggestion.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import yaml

from .data import DataConfig
from .errors import ConfigurationError
from .identity import FREmbedderConfig
from .losses import LossWeights
from .pipeline import ModelConfig

SEED_ENV_VAR = "IDSIS_SEED"


@dataclass(frozen=True)
class RunConfig:
    # data
    resolution: int = 64
    identity_count: int = 150
    variations_per_identity: int = 10
    data_seed: int = 0
    disjoint_identities: bool = True
    # model
    num_classes: int = 6
    style_dim: int = 64  # d_s
    id_dim: int = 128  # d_id
    stage_dims: tuple[int, ...] | None = None  # per-stage generator widths
    head_count: int = 1
    self_attention: bool = False
    style_width: int = 16
    disc_width: int = 24
    # losses
    lambda_fm: float = 10.0
    lambda_prc: float = 10.0
    lambda_id: float = 10.0
    # optimization
    lr_g: float = 1e-4
    lr_d: float = 4e-4
    beta1: float = 0.0
    beta2: float = 0.999
    batch_size: int = 16
    iterations: int = 20000
    checkpoint_every: int = 1000
    log_every: int = 100
    seed: int = 0
    num_threads: int = 0  # 0 keeps torch's default
    # FR embedders (train-FR conditions the generator; eval-FR only scores)
    fr_train_width: int = 16
    fr_train_depth: int = 4
    fr_train_seed: int = 101
    fr_eval_width: int = 24
    fr_eval_depth: int = 5
    fr_eval_seed: int = 202
    fr_epochs: int = 40
    fr_lr: float = 3e-3
    fr_batch_size: int = 32
    # evaluation
    far_target: float = 0.01
    attack_pair_count: int = 500
    impostor_pair_count: int = 1000
    eval_batch_size: int = 32
    eval_seed: int = 7
    # paths
    dataset_root: str = "runs/data"
    output_root: str = "runs"


_VALID_KEYS = tuple(f.name for f in fields(RunConfig))
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    target = _FIELD_TYPES[key]
    if value is None:
        if "None" in str(target):
            return None
        raise ConfigurationError(f"config key {key!r} must not be null")
    if target == "int":
        try:
            ok = not isinstance(value, bool) and (
                isinstance(value, int) or int(value) == float(value)
            )
        except (TypeError, ValueError):
            ok = False
        if not ok:
            raise ConfigurationError(f"config key {key!r} expects an integer, got {value!r}")
        return int(value)
    if target == "float":
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"config key {key!r} expects a number, got {value!r}")
    if target == "bool":
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
        raise ConfigurationError(f"config key {key!r} expects a boolean, got {value!r}")
    if target == "str":
        return str(value)
    if key == "stage_dims":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split() if v]
        return tuple(int(v) for v in value)
    return value


def _reject_unknown(key: str):
    if key not in _VALID_KEYS:
        hint = difflib.get_close_matches(key, _VALID_KEYS, n=1)
        suggestion = f" (did you mean {hint[0]!r}?)" if hint else ""
        raise ConfigurationError(
            f"unknown config key {key!r}{suggestion}; valid keys: {', '.join(_VALID_KEYS)}"
        )


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Resolve a RunConfig from defaults <- file <- overrides <- IDSIS_SEED."""
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"config file {path} must be a flat key-value mapping")
        for key, value in loaded.items():
            _reject_unknown(str(key))
            values[str(key)] = _coerce(str(key), value)
    for key, value in (overrides or {}).items():
        _reject_unknown(key)
        values[key] = _coerce(key, value)
    if SEED_ENV_VAR in os.environ:
        values["seed"] = _coerce("seed", os.environ[SEED_ENV_VAR])
    return RunConfig(**values)


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(payload.encode()).hexdigest()


def data_config(cfg: RunConfig) -> DataConfig:
    return DataConfig(
        resolution=cfg.resolution,
        identity_count=cfg.identity_count,
        variations_per_identity=cfg.variations_per_identity,
        seed=cfg.data_seed,
        disjoint_identities=cfg.disjoint_identities,
    )


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(
        resolution=cfg.resolution,
        num_classes=cfg.num_classes,
        style_dim=cfg.style_dim,
        id_dim=cfg.id_dim,
        stage_dims=cfg.stage_dims,
        head_count=cfg.head_count,
        self_attention=cfg.self_attention,
        style_width=cfg.style_width,
        disc_width=cfg.disc_width,
    )


def fr_config(cfg: RunConfig, role: str) -> FREmbedderConfig:
    if role == "train":
        width, depth, seed = cfg.fr_train_width, cfg.fr_train_depth, cfg.fr_train_seed
    elif role == "eval":
        width, depth, seed = cfg.fr_eval_width, cfg.fr_eval_depth, cfg.fr_eval_seed
    else:
        raise ConfigurationError(f"role must be 'train' or 'eval', got {role!r}")
    return FREmbedderConfig(
        width=width,
        depth=depth,
        seed=seed,
        epochs=cfg.fr_epochs,
        embed_dim=cfg.id_dim,
        resolution=cfg.resolution,
        lr=cfg.fr_lr,
        batch_size=cfg.fr_batch_size,
    )


def loss_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(lambda_fm=cfg.lambda_fm, lambda_prc=cfg.lambda_prc, lambda_id=cfg.lambda_id)
