"""Run configuration: defaults, JSON config files, key=value overrides.

Unknown keys and type mismatches are rejected so a typo cannot silently
fall back to a default.  Every command echoes its effective configuration
to `effective_config.json` in its output directory for reproducibility.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

DEFAULTS: dict = {
    # loss weights
    "lambda_d": 10.0,        # discriminator feature matching (both networks)
    "lambda_vgg": 10.0,      # perceptual feature matching, pose network
    "lambda_backbone": 10.0, # perceptual feature matching, frame network
    "lambda_mask": 1.0,      # mask regularizer, frame network
    # optimizer
    "lr": 2e-4,
    "beta1": 0.5,
    "beta2": 0.999,
    # data
    "delta": 2,
    "fps": 30,
    "resolution": 128,
    "frames": 300,
    "clips": 1,
    "pose_threshold": 8.0 / 255.0,
    # loop
    "epochs": 200,
    "max_steps": None,
    "batch_size": 4,
    "seed": 0,
    "log_every": 25,
    "dump_every": 0,
    # model
    "width_mult": 1.0,
    "n_res": 9,
    "norm": "instance",
    # augmentation
    "occlusion_prob": 0.5,
    "occlusion_axes": [0.05, 0.30],
    # perceptual backbone
    "backbone_mode": "random",
    "backbone_seed": 0,
    "backbone_weights": None,
}

# Keys whose default is None still need a concrete type for validation.
_NONE_TYPES = {"max_steps": int, "backbone_weights": str}


class ConfigError(ValueError):
    """Invalid configuration: unknown key, wrong type, or bad value."""


def _check_type(key: str, value):
    default = DEFAULTS[key]
    expected = _NONE_TYPES.get(key, type(default)) if default is None else type(default)
    if value is None:
        if key in _NONE_TYPES:
            return None
        raise ConfigError(f"{key} may not be null")
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {type(value).__name__}")
        return list(value)
    if not isinstance(value, expected) or isinstance(value, bool) and expected is not bool:
        raise ConfigError(f"{key} must be {expected.__name__}, got {type(value).__name__}")
    return value


def _validate(values: dict) -> dict:
    if values["lr"] <= 0:
        raise ConfigError(f"lr must be positive, got {values['lr']}")
    if values["delta"] < 1:
        raise ConfigError(f"delta must be >= 1, got {values['delta']}")
    if values["fps"] <= 0:
        raise ConfigError(f"fps must be positive, got {values['fps']}")
    if values["batch_size"] < 1:
        raise ConfigError("batch_size must be >= 1")
    if values["epochs"] < 1:
        raise ConfigError("epochs must be >= 1")
    for key in ("lambda_d", "lambda_vgg", "lambda_backbone", "lambda_mask"):
        if values[key] < 0:
            raise ConfigError(f"{key} must be nonnegative")
    if not 0.0 <= values["occlusion_prob"] <= 1.0:
        raise ConfigError("occlusion_prob must lie in [0, 1]")
    if not 0.0 < values["pose_threshold"] < 1.0:
        raise ConfigError("pose_threshold must lie in (0, 1)")
    if values["resolution"] % 16:
        raise ConfigError("resolution must be divisible by 16")
    return values


def parse_overrides(pairs) -> dict:
    """Parse 'key=value' strings; values are JSON, falling back to plain text."""
    overrides = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key.strip()] = value
    return overrides


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Merge defaults <- config file <- overrides, then validate."""
    values = dict(DEFAULTS)
    file_values = {}
    if path is not None:
        text = Path(path).read_text().strip()
        if text:
            file_values = json.loads(text)
            if not isinstance(file_values, dict):
                raise ConfigError(f"{path} must hold a JSON object")
    merged_sources = [file_values, overrides or {}]
    for source in merged_sources:
        for key, value in source.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _check_type(key, value)
    return _validate(values)


@dataclasses.dataclass
class RunConfig:
    """One command invocation: what ran, from where, with which settings."""

    command: str
    config_path: str | None
    overrides: dict
    values: dict
    out_dir: Path | None = None

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def dump(self) -> Path | None:
        if self.out_dir is None:
            return None
        self.out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "command": self.command,
            "config_path": self.config_path,
            "overrides": self.overrides,
            "values": self.values,
        }
        path = self.out_dir / "effective_config.json"
        path.write_text(json.dumps(payload, indent=2))
        return path


def make_run_config(command: str, config_path, override_pairs, out_dir) -> RunConfig:
    overrides = parse_overrides(override_pairs)
    values = load_config(config_path, overrides)
    return RunConfig(
        command=command,
        config_path=str(config_path) if config_path else None,
        overrides=overrides,
        values=values,
        out_dir=Path(out_dir) if out_dir else None,
    )
