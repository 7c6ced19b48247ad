#!/usr/bin/env python3
"""
Effective configuration: defaults from default_config.json, then an optional
JSON config file, then command-line overrides. Every value remembers where it
came from.
"""

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple

from dotenv import load_dotenv

from errors import ConfigurationError

DEFAULT_CONFIG_FILE = Path(__file__).resolve().parent / "default_config.json"

# Keys whose integer default may also be the string "auto"
AUTO_KEYS = {"vision.period"}
# Keys whose default is null: the type a non-null value must have
NULLABLE_KEYS = {
    "train.max_steps": int,
    "train.val_max_windows": int,
    "vision.rp_threshold": float,
}
LOSSES = ("MSE", "MAE")
OPTIMIZERS = ("adam", "adamw")


def load_default_config(path: Path = DEFAULT_CONFIG_FILE) -> Dict:
    """Load the shipped defaults."""
    if not path.exists():
        raise FileNotFoundError(f"Default config not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)


def coerce_value(key: str, value, default):
    """Convert value to the type of the key's default."""
    if key in AUTO_KEYS and value == "auto":
        return value
    if value is None:
        if default is None or key in NULLABLE_KEYS:
            return value
        raise ConfigurationError(f"'{key}' cannot be null")
    if key in NULLABLE_KEYS:
        default = NULLABLE_KEYS[key]()
    if default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if isinstance(default, list):
            if not isinstance(value, list):
                raise ValueError(value)
            return list(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigurationError(
            f"Value {value!r} for '{key}' is not a valid {type(default).__name__}") from None
    return value


def parse_override(text: str) -> Tuple[str, object]:
    """'key=value' -> (key, value); the value is read as JSON when it parses."""
    if "=" not in text:
        raise ConfigurationError(f"Override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


class EffectiveConfig(Mapping):
    """Read-only view of the merged configuration with per-key provenance."""

    def __init__(self, values: Dict, provenance: Dict[str, str]):
        self._values = dict(values)
        self._provenance = dict(provenance)

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigurationError(f"Unknown configuration key '{key}'")
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def provenance(self, key: str) -> str:
        return self._provenance[key]

    def as_dict(self) -> Dict:
        return dict(self._values)

    def with_overrides(self, overrides: Mapping) -> "EffectiveConfig":
        values, provenance = dict(self._values), dict(self._provenance)
        for key, value in overrides.items():
            if key not in values:
                raise ConfigurationError(f"Unknown configuration key '{key}'")
            values[key] = coerce_value(key, value, values[key])
            provenance[key] = "override"
        return EffectiveConfig(values, provenance)

    def echo_lines(self):
        return [f"{key} = {json.dumps(self._values[key])}  [{self._provenance[key]}]"
                for key in sorted(self._values)]

    def hash(self) -> str:
        return config_hash(self._values)


def config_hash(values: Mapping) -> str:
    """SHA-256 of the canonical (sorted-key) JSON of the values."""
    canonical = json.dumps(dict(values), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def load_config(config_path: Optional[str] = None, overrides: Iterable = (),
                defaults: Optional[Dict] = None) -> EffectiveConfig:
    """
    Merge defaults < config file < overrides.

    Args:
        config_path: optional flat JSON file with dotted keys
        overrides: 'key=value' strings or (key, value) pairs

    Returns:
        EffectiveConfig
    """
    if defaults is None:
        defaults = load_default_config()

    values = dict(defaults)
    provenance = {key: "default" for key in defaults}

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        with open(path, 'r', encoding='utf-8') as f:
            try:
                loaded = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        for key, value in loaded.items():
            if key not in defaults:
                raise ConfigurationError(f"Unknown configuration key '{key}' in {path}")
            values[key] = coerce_value(key, value, defaults[key])
            provenance[key] = "file"

    pairs = [parse_override(o) if isinstance(o, str) else tuple(o) for o in overrides]
    for key, value in pairs:
        if key not in defaults:
            raise ConfigurationError(f"Unknown configuration key '{key}'")
        values[key] = coerce_value(key, value, defaults[key])
        provenance[key] = "override"

    return EffectiveConfig(values, provenance)


def load_environment() -> Dict:
    """Read .env and the LDM4TS_* environment knobs."""
    load_dotenv()
    raw = os.getenv("LDM4TS_NUM_WORKERS", "0")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigurationError(f"LDM4TS_NUM_WORKERS must be an integer, got {raw!r}") from None
    if workers < 0:
        raise ConfigurationError(f"LDM4TS_NUM_WORKERS must be >= 0, got {workers}")
    return {"num_workers": workers}


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    epochs: int = 10
    patience: int = 3
    lambda_diff: float = 1.0
    lambda_pred: float = 1.0
    lambda_recon: float = 0.0
    seed: int = 2024
    sampler: str = "ddim"
    inference_steps: int = 50
    loss: str = "MSE"
    optimizer: str = "adam"
    weight_decay: float = 0.0
    freeze_ldm: bool = True
    log_every: int = 10
    max_steps: Optional[int] = None
    val_max_windows: Optional[int] = None
    vae_epochs: int = 5
    vae_learning_rate: float = 1e-3
    num_workers: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0 or self.vae_learning_rate <= 0:
            raise ConfigurationError("Learning rates must be positive")
        if self.epochs < 0 or self.vae_epochs < 0:
            raise ConfigurationError("Epoch counts must be >= 0")
        if not (1 <= self.patience) or (self.epochs and self.patience > self.epochs):
            raise ConfigurationError(f"Need 1 <= patience <= epochs, got patience={self.patience}, epochs={self.epochs}")
        lambdas = (self.lambda_diff, self.lambda_pred, self.lambda_recon)
        if min(lambdas) < 0 or sum(lambdas) == 0:
            raise ConfigurationError(f"Loss weights must be >= 0 and not all zero, got {lambdas}")
        if self.sampler not in ("ddim", "ddpm"):
            raise ConfigurationError(f"Unknown sampler {self.sampler!r}")
        if self.loss not in LOSSES:
            raise ConfigurationError(f"train.loss must be one of {LOSSES}, got {self.loss!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"train.optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.log_every < 1:
            raise ConfigurationError(f"train.log_every must be >= 1, got {self.log_every}")
        for name in ("max_steps", "val_max_windows"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigurationError(f"train.{name} must be >= 1 or null, got {value}")

    @classmethod
    def from_config(cls, cfg: Mapping, num_workers: int = 0) -> "TrainConfig":
        return cls(
            batch_size=cfg["train.batch_size"],
            learning_rate=cfg["train.learning_rate"],
            epochs=cfg["train.epochs"],
            patience=cfg["train.patience"],
            lambda_diff=cfg["train.lambda_diff"],
            lambda_pred=cfg["train.lambda_pred"],
            lambda_recon=cfg["train.lambda_recon"],
            seed=cfg["train.seed"],
            sampler="ddim" if cfg["diffusion.use_ddim"] else "ddpm",
            inference_steps=cfg["diffusion.inference_steps"],
            loss=cfg["train.loss"],
            optimizer=cfg["train.optimizer"],
            weight_decay=cfg["train.weight_decay"],
            freeze_ldm=cfg["train.freeze_ldm"],
            log_every=cfg["train.log_every"],
            max_steps=cfg["train.max_steps"],
            val_max_windows=cfg["train.val_max_windows"],
            vae_epochs=cfg["vae.epochs"],
            vae_learning_rate=cfg["vae.learning_rate"],
            num_workers=num_workers,
        )
