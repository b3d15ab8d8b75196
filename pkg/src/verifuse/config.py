"""Run configuration: defaults, JSON config files, flag overrides and the config hash."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .encoders import IMAGE_BACKENDS, TEXT_BACKENDS
from .fusion import DEFAULT_SWEEP_WEIGHTS, check_weights
from .ingest import DATASETS
from .training import TrainConfig

CACHE_ENV = "VERIFUSE_CACHE_DIR"
FUSIONS = ("early", "late")
# excluded from the hash so identical runs in different directories agree
PATH_FIELDS = ("manifest", "output_dir", "cache_dir", "text_checkpoint", "image_checkpoint")


class ConfigError(ValueError):
    """The run configuration is invalid (CLI exit code 3)."""


@dataclass(frozen=True)
class RunConfig:
    dataset: str = "synthetic"
    manifest: str | None = None
    output_dir: str = "verifuse-out"
    cache_dir: str | None = None
    text_encoder: str = "stub_text"
    image_encoder: str = "stub_image"
    text_checkpoint: str | None = None
    image_checkpoint: str | None = None
    text_dim: int = 0
    image_dim: int = 0
    max_len: int = 0
    fusion: str = "early"
    weights: tuple[float, float] = (0.5, 0.5)
    sweep_weights: tuple[tuple[float, float], ...] = DEFAULT_SWEEP_WEIGHTS
    seed: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.980
    epochs: int = 30
    batch_size: int = 128
    dropout: float = 0.4
    fetch_workers: int = 8
    fetch_timeout: float = 10.0
    fetch_retries: int = 2

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.text_encoder not in TEXT_BACKENDS:
            raise ConfigError(f"text_encoder must be one of {TEXT_BACKENDS}, got {self.text_encoder!r}")
        if self.image_encoder not in IMAGE_BACKENDS:
            raise ConfigError(f"image_encoder must be one of {IMAGE_BACKENDS}, got {self.image_encoder!r}")
        if self.max_len and self.max_len < 3:
            raise ConfigError("max_len must be >= 3 (or 0 for the dataset default)")
        if self.text_dim < 0 or self.image_dim < 0:
            raise ConfigError("feature dims must be positive (or 0 for the encoder default)")
        object.__setattr__(self, "weights", _pair(self.weights))
        object.__setattr__(self, "sweep_weights", tuple(_pair(w) for w in self.sweep_weights))
        if not self.sweep_weights:
            raise ConfigError("sweep_weights must not be empty")
        try:
            for w in (self.weights, *self.sweep_weights):
                check_weights(*w)
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epochs=self.epochs,
            batch_size=self.batch_size,
            dropout=self.dropout,
            seed=self.seed,
        )

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def cache(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else self.out / "cache"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["sweep_weights"] = [list(w) for w in self.sweep_weights]
        return d

    @property
    def hash(self) -> str:
        relevant = {k: v for k, v in self.to_dict().items() if k not in PATH_FIELDS}
        return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()[:16]


def _pair(w) -> tuple[float, float]:
    try:
        a, b = w
        return float(a), float(b)
    except (TypeError, ValueError):
        raise ConfigError(f"expected a weight pair (w1, w2), got {w!r}") from None


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(name: str, raw: str):
    """Convert a command-line string into the type of RunConfig field ``name``."""
    kind = FIELD_TYPES[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "str | None":
            return None if raw.lower() in ("", "none", "null") else raw
        if kind == "tuple[float, float]":
            return _parse_pairs(raw)[0] if not raw.strip().startswith("[") else json.loads(raw)
        if kind.startswith("tuple[tuple"):
            return json.loads(raw) if raw.strip().startswith("[") else _parse_pairs(raw)
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad value for --{name.replace('_', '-')}: {raw!r} ({exc})") from None
    return raw


def _parse_pairs(raw: str) -> list[tuple[float, float]]:
    """``"0.4,0.6;0.5,0.5"`` -> ``[(0.4, 0.6), (0.5, 0.5)]``."""
    pairs = []
    for chunk in raw.split(";"):
        parts = [p for p in chunk.replace(" ", "").split(",") if p]
        if len(parts) != 2:
            raise ValueError(f"weight pair {chunk!r} does not have two entries")
        pairs.append((float(parts[0]), float(parts[1])))
    return pairs


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - set(FIELD_TYPES))
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return data


def resolve_config(file_values: dict | None = None, flag_values: dict | None = None,
                   env: dict | None = None) -> RunConfig:
    """Merge defaults < config file < environment < flags into a validated RunConfig.

    The environment only contributes the cache directory.
    """
    env = os.environ if env is None else env
    merged: dict = dict(file_values or {})
    if env.get(CACHE_ENV):
        merged["cache_dir"] = env[CACHE_ENV]
    merged.update(flag_values or {})
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None

