"""Experiment configuration: YAML files over defaults, dotted overrides,
and construction of the typed per-module configs.

Keys live in flat dotted namespaces (model.*, train.*, loss.*, freq.*,
store.*, dataset.*). Unknown keys are rejected so typos fail before any
compute starts.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .engine import TrainConfig
from .losses import LossWeights
from .model import ModelConfig

OUTPUT_ROOT_ENV = "BIMAE_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

DEFAULTS: dict = {
    "name": "experiment",
    "dataset": {
        "id": "synthetic",        # synthetic | cifar100
        "root": None,             # directory holding cifar-100-python/
        "n_tasks": 5,
        "class_order_seed": 0,
        "data_seed": 0,
        "train_per_class": 100,
        "test_per_class": 50,
        "image_side": 32,
    },
    "model": {
        "image_side": 32,
        "patch_side": 4,
        "channels": 3,
        "embed_dim": 384,
        "encoder_blocks": 5,
        "decoder_blocks": 1,
        "heads": 12,
        "ffn_ratio": 2.0,
        "detailed_mlp_layers": 3,
        "detailed_mlp_hidden": 1536,
        "bilateral": True,
    },
    "train": {
        "mask_ratio": 0.75,
        "r1": 0.75,
        "r2": 0.4,
        "epochs": 20,
        "batch_size": 64,
        "base_lr": 1e-4,
        "seed": 0,
        "balanced_batches": False,
        "augment": True,
        "crop_padding": 4,
    },
    "loss": {
        "lambda_cls": 0.01,
        "lambda_rec": 1.0,
        "lambda_det": 1.0,
    },
    "freq": {
        "cutoff_fraction": 0.25,
    },
    "store": {
        "budget_bytes": 614400,   # 20 full 32x32x3 images for each of 10 classes
    },
}


class ConfigError(ValueError):
    pass


def _coerce_scalar(value, current):
    """YAML 1.1 reads dotless scientific notation like ``5e-4`` as a string;
    nudge such strings back to numbers when they replace a numeric default."""
    numeric_slot = isinstance(current, (int, float)) and not isinstance(current, bool)
    if isinstance(value, str) and numeric_slot:
        for parse in (int, float):
            try:
                return parse(value)
            except ValueError:
                continue
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted} must be a section, got {value!r}")
            _merge(base[key], value, prefix=f"{dotted}.")
        elif isinstance(value, dict):
            raise ConfigError(f"{dotted} is a scalar key, got a section")
        else:
            base[key] = _coerce_scalar(value, base[key])


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; values parse as YAML scalars."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    node = cfg
    parts = dotted.strip().split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config section: {dotted}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node:
        raise ConfigError(f"unknown config key: {dotted}")
    if isinstance(node[leaf], dict):
        raise ConfigError(f"{dotted} is a section, not a key")
    try:
        node[leaf] = _coerce_scalar(yaml.safe_load(raw), node[leaf])
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {dotted}: {exc}") from exc


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML file at ``path``, then dotted overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        _merge(cfg, loaded)
    for assignment in overrides:
        apply_override(cfg, assignment)
    return cfg


def build_configs(cfg: dict) -> tuple[ModelConfig, TrainConfig, int]:
    """Turn a resolved config dict into validated typed configs."""
    try:
        model = ModelConfig(**cfg["model"])
        weights = LossWeights(**cfg["loss"])
        train = TrainConfig(**cfg["train"], weights=weights,
                            cutoff_fraction=cfg["freq"]["cutoff_fraction"])
        budget = int(cfg["store"]["budget_bytes"])
        if budget < 0:
            raise ValueError(f"store.budget_bytes must be non-negative, got {budget}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return model, train, budget


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))


def run_directory(cfg: dict, explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return output_root() / f"{cfg['name']}_seed{cfg['train']['seed']}"


def archive_config(cfg: dict, out_dir) -> Path:
    """Write the fully resolved config next to the run outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved.yaml"
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
    return path
