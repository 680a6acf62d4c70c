"""Experiment configuration: defaults, file loading, and key=value overrides.

Every field has a default; unknown keys and type mismatches are rejected with
the offending key named. Files may be YAML or JSON (JSON parses as YAML); the
resolved form is always written back as JSON.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # experiment identity
    family: str = "point-robot"
    tier: str = "mixed"
    kind: str = "dt"
    variant: str = "full"
    seed: int = 0
    out_dir: str = "runs/exp"
    data_dir: str = ""  # defaults to <out_dir>/data when empty

    # task sampling and data collection
    n_train_tasks: int = 45
    n_test_tasks: int = 5
    n_traj: int = 200

    # world model
    wm_layers: int = 2
    wm_heads: int = 4
    wm_dim: int = 64
    z_dim: int = 64
    wm_decoder_width: int = 256
    wm_steps: int = 2000
    wm_batch: int = 32
    wm_lr: float = 3e-4

    # text encoder and contrastive alignment
    text_layers: int = 2
    text_heads: int = 4
    text_dim: int = 64
    joint_dim: int = 64
    align_steps: int = 1200
    align_batch: int = 32
    align_lr: float = 3e-4
    align_weight_decay: float = 1e-4

    # causal-transformer policy
    dt_layers: int = 3
    dt_heads: int = 1
    dt_dim: int = 128
    dt_horizon: int = 20
    dt_steps: int = 3000
    dt_batch: int = 64
    dt_lr: float = 1e-4

    # diffusion policy
    dd_layers: int = 4
    dd_heads: int = 8
    dd_dim: int = 128
    dd_horizon: int = 10
    diffusion_steps: int = 20
    dd_steps: int = 4000
    dd_batch: int = 64
    dd_lr: float = 2e-4
    p_drop: float = 0.25
    guidance_weight: float = 1.2
    sample_noise_scale: float = 0.5

    # evaluation protocol
    eval_episodes: int = 10
    eval_seeds: int = 5
    eval_style: str = "standard"

    def resolved_data_dir(self) -> str:
        return self.data_dir or str(Path(self.out_dir) / "data")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, value, target_type):
    if target_type is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if target_type is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if target_type is str and isinstance(value, str):
        return value
    if target_type is bool and isinstance(value, bool):
        return value
    raise ConfigError(f"config key {key!r} expects {target_type.__name__}, got {value!r}")


def from_dict(payload: dict) -> ExperimentConfig:
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError(f"config root must be a mapping, got {type(payload).__name__}")
    values = {}
    for key, value in payload.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value, _resolved_type(key))
    return ExperimentConfig(**values)


def _resolved_type(key: str):
    # dataclass field types are strings under `from __future__ import annotations`
    name = _FIELDS[key].type
    return {"str": str, "int": int, "float": float, "bool": bool}[name]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    payload = yaml.safe_load(path.read_text())
    return from_dict(payload)


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``key=value`` strings; values parse as YAML scalars."""
    values = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        parsed = yaml.safe_load(raw)
        target = _resolved_type(key)
        if target is float and isinstance(parsed, str):
            # YAML needs "1.0e-3" for scientific notation; accept plain "1e-3"
            try:
                parsed = float(parsed)
            except ValueError:
                pass
        values[key] = _coerce(key, parsed, target)
    return ExperimentConfig(**values)
