"""Run configuration: flat key=value files with typed defaults.

Every field has a default, unknown keys are rejected, and CLI-provided
overrides win over file values. The format is plain text, one
``key = value`` per line, ``#`` starting a comment; tuples are written
as comma-separated values.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config_text",
           "config_from_mapping", "apply_overrides", "config_to_dict",
           "config_from_dict"]


class ConfigError(Exception):
    """Malformed configuration input."""


@dataclass(frozen=True)
class RunConfig:
    # model
    reduction: int = 4
    stem_channels: int = 64
    pose_channels: int = 64
    context_dim: int = 128
    channel_mult: tuple = (1, 2)
    temporal_block: str = "transformer"  # or "mamba" / "none"
    state_size: int = 8
    num_heads: int = 4
    mamba_expand: int = 1
    max_frames: int = 32
    use_reference_pose: bool = True
    # diffusion
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    sampler: str = "ddim"
    num_inference_steps: int = 50
    eta: float = 0.0
    guidance_scale: float = 1.0
    latent_scale: float = 4.0  # codec space -> diffusion space amplitude
    clip_denoised: float = 2.0  # 0 disables the sampling-time z0 clamp
    # training
    learning_rate: float = 5e-5
    weight_decay: float = 1e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 1
    dropout_p: float = 0.5
    segment_lengths: tuple = (16, 32)
    max_steps: int = 5000
    checkpoint_every: int = 500
    log_every: int = 50
    seed: int = 0
    # data and paths
    image_size: int = 64
    n_videos: int = 8
    video_frames: int = 16
    data_seed: int = 0
    dataset_dir: str = "data"
    output_dir: str = "out"
    checkpoint_dir: str = "ckpt"


_DEFAULTS = RunConfig()
_FIELD_TYPES = {
    f.name: type(getattr(_DEFAULTS, f.name)) for f in dataclasses.fields(RunConfig)
}


def _parse_value(name: str, raw: str):
    kind = _FIELD_TYPES[name]
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            parts = [p for p in raw.split(",") if p.strip()]
            return tuple(int(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key -> value-string mapping from flat config text."""
    mapping: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = stripped.split("=", 1)
        mapping[key.strip()] = value.strip()
    return mapping


def config_from_mapping(mapping: dict[str, str]) -> RunConfig:
    values = {}
    for key, raw in mapping.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    return config_from_mapping(parse_config_text(p.read_text()))


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """A new config with string overrides parsed and applied."""
    updates = {}
    for key, raw in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key!r}")
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(config, **updates)


def config_to_dict(config: RunConfig) -> dict:
    """JSON-friendly echo of the configuration."""
    out = {}
    for f in dataclasses.fields(RunConfig):
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out


def config_from_dict(data: dict) -> RunConfig:
    values = {}
    for key, value in data.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key: {key!r}")
        if _FIELD_TYPES[key] is tuple:
            value = tuple(value)
        values[key] = value
    return RunConfig(**values)
