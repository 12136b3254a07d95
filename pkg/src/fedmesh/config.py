"""Experiment configuration: flat JSON keys, each overridable by ``--key``."""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, fields

from fedmesh.model import ModelDims
from fedmesh.protocol import AGGREGATION_MODES, ConfigError, FederationConfig
from fedmesh.transport import IN_PROCESS, STREAM_SOCKET, NetworkConfig

MODES = ("local", "serve", "join")


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "local"
    clients: int = 5
    rounds: int = 15
    epochs: int = 20
    lr: float = 1e-4
    batch: int = 32
    seed: int = 42
    aggregation: str = "sample_weighted"
    data: str = "synthetic"
    n_samples: int = 5855
    imbalance: float = 0.7
    image_side: int = 14
    feature_dim: int = 32
    hidden_dim: int = 16
    partition: str = "iid"
    alpha: float = 0.5
    test_fraction: float = 0.2
    augment: bool = False
    latency_ms: float = 0.0
    drop_probability: float = 0.0
    network_seed: int = 0
    retries: int = 3
    timeout_ms: float = 100.0
    max_frame_size: int = 64 * 1024 * 1024
    listen: str = "127.0.0.1:7070"
    connect: str = "127.0.0.1:7070"
    client_id: int = 0
    join_timeout: float = 30.0
    round_timeout: float = 600.0
    out: str = "runs/latest"
    clock: str = "wall"
    workers: int = 1
    app_samples: int = 32

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(f"aggregation must be one of {AGGREGATION_MODES}")
        if self.clock not in ("wall", "virtual"):
            raise ConfigError("clock must be 'wall' or 'virtual'")
        if self.partition not in ("iid", "label_skew"):
            raise ConfigError("partition must be 'iid' or 'label_skew'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.image_side < 4:
            raise ConfigError("image_side must be >= 4")

    @property
    def synthetic(self):
        return self.data == "synthetic"

    def federation(self):
        return FederationConfig(
            num_clients=self.clients,
            rounds=self.rounds,
            local_epochs=self.epochs,
            learning_rate=self.lr,
            batch_size=self.batch,
            aggregation_mode=self.aggregation,
            seed=self.seed,
            dims=ModelDims(self.image_side ** 2, self.feature_dim, self.hidden_dim),
        )

    def network(self):
        return NetworkConfig(
            mode=IN_PROCESS if self.mode == "local" else STREAM_SOCKET,
            latency_ms=self.latency_ms,
            drop_probability=self.drop_probability,
            seed=self.network_seed,
            max_frame_size=self.max_frame_size,
            retries=self.retries,
            timeout_ms=self.timeout_ms,
        )

    def validate_paths(self):
        if not self.synthetic and not os.path.isdir(self.data):
            raise ConfigError(f"data directory does not exist: {self.data}")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_json(self):
        return dataclasses.asdict(self)


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
CONFIG_KEYS = tuple(FIELD_TYPES)


def coerce(key, value):
    kind = FIELD_TYPES[key]
    if kind == "bool":
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ConfigError(f"{key}: not a boolean: {value!r}")
            return lowered in ("1", "true", "yes", "on")
        return bool(value)
    if kind == "int":
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
    if kind == "float":
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
        if math.isnan(out):
            raise ConfigError(f"{key}: NaN is not allowed")
        return out
    return str(value)


def load_config_file(path):
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return {k: coerce(k, v) for k, v in raw.items()}


def build_config(file_values=None, overrides=None):
    """Defaults, then config-file values, then explicit overrides."""
    values = {}
    values.update(file_values or {})
    values.update({k: coerce(k, v) for k, v in (overrides or {}).items()})
    return ExperimentConfig(**values)
