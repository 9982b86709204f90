"""Run configuration: defaults, JSON loading, dotted overrides."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .streams import ConfigurationError

SEED_ENV = "PGP_SEED"


@dataclass(frozen=True)
class GNNConfig:
    kind: str = "gat"
    depth: int = 2


@dataclass(frozen=True)
class RolloutConfig:
    max_steps: int = 12
    samples: int = 200


@dataclass(frozen=True)
class Thresholds:
    agent_node_m: float = 10.0
    proximal_dist_m: float = 4.5
    proximal_yaw_rad: float = math.pi / 4
    gt_radius_m: float = 3.0
    gt_yaw_rad: float = math.pi / 4
    offroad_margin_m: float = 1.0
    miss_m: float = 2.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    pretrain_epochs: int = 100
    finetune_epochs: int = 100
    epoch_scale: float = 1.0

    def epochs(self, phase: str) -> int:
        n = self.pretrain_epochs if phase == "pretrain" else self.finetune_epochs
        return max(1, int(round(n * self.epoch_scale))) if n > 0 else 0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    n_scenes: int = 1000
    num_modes: int = 10
    z_dim: int = 5
    decoder_mode: str = "traversals+lv"
    position_scale_m: float = 10.0
    gnn: GNNConfig = field(default_factory=GNNConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = "data"
    run_dir: str = "runs/default"

    def __post_init__(self):
        from .decoder import Z_DIM, check_decoder_mode
        from .encoder import GNN_KINDS

        check_decoder_mode(self.decoder_mode)
        if self.gnn.kind not in GNN_KINDS:
            raise ConfigurationError(f"gnn.kind must be one of {GNN_KINDS}, got {self.gnn.kind!r}")
        if self.gnn.depth not in (0, 1, 2):
            raise ConfigurationError(f"gnn.depth must be 0, 1 or 2, got {self.gnn.depth}")
        if self.z_dim != Z_DIM:
            raise ConfigurationError(f"z_dim is fixed at {Z_DIM}")
        if self.num_modes < 1 or self.rollout.samples < self.num_modes:
            raise ConfigurationError("need 1 <= num_modes <= rollout.samples")
        if self.rollout.max_steps < 1:
            raise ConfigurationError("rollout.max_steps must be positive")
        if not self.position_scale_m > 0:
            raise ConfigurationError("position_scale_m must be positive")
        if self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigurationError("batch_size and lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _build(cls, data, "")

    def override(self, updates: dict[str, Any]) -> "RunConfig":
        """Apply ``{"a.b": value}`` or nested dict updates; unknown keys are rejected."""
        merged = self.to_dict()
        for key, value in _flatten(updates).items():
            node = merged
            parts = key.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigurationError(f"unknown config key {key!r}")
                node = node[p]
            if parts[-1] not in node or isinstance(node[parts[-1]], dict):
                raise ConfigurationError(f"unknown config key {key!r}")
            node[parts[-1]] = value
        return RunConfig.from_dict(merged)


def _flatten(d: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"config section {prefix or '<root>'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"unknown config key {prefix + unknown[0]!r}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, current, prefix + name)
    return replace(defaults, **kwargs) if kwargs else defaults


def _coerce(value, default, key: str):
    try:
        if isinstance(default, bool):
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise ConfigurationError(f"config key {key!r}: bad value {value!r}") from None
    return value


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None,
                env: dict[str, str] | None = None) -> RunConfig:
    """Defaults <- JSON file <- ``PGP_SEED`` <- explicit overrides (last wins)."""
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        cfg = RunConfig.from_dict(data)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = cfg.override({"seed": int(env[SEED_ENV])})
        except ValueError:
            raise ConfigurationError(f"{SEED_ENV} must be an integer") from None
    if overrides:
        cfg = cfg.override(overrides)
    return cfg
