"""
Configuration module for guidederain.

Handles loading flat run configurations (YAML or key = value lines), merging command-line
overrides and echoing the resolved configuration for reproducibility.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional
import logging
import re

import yaml

from .blocks import POOLING_KINDS
from .data import RainParams
from .loss import LossWeights
from .network import TOPOLOGIES, AblationMode, ModelConfig
from .optim import LrSchedule


logger = logging.getLogger(__name__)

FULL_SCHEDULE_EPOCHS = 2000


class ConfigError(Exception):
    """Raised when configuration is invalid or cannot be read."""
    pass


@dataclass
class RunConfig:
    """Fully resolved settings for one command."""
    seed: int = 0
    mode: str = "m4"
    multiscale: bool = True
    dilated_streams: bool = True
    physical_loss: bool = True

    # data
    dataset: Optional[str] = None
    synthetic: bool = False
    synthetic_count: int = 16
    synthetic_size: int = 64
    holdout_fraction: float = 0.25
    workers: int = 1

    # training
    epochs: Optional[int] = None
    schedule_scale: float = 0.1
    batch: int = 8
    crop: int = 32
    lr: float = 5e-4
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.001
    checkpoint_every: int = 50

    # architecture
    base_channels: int = 32
    encoder_depth: int = 3
    msrb_per_level: int = 1
    pooling: str = "avg"

    # rain synthesis
    streak_count: List[int] = field(default_factory=lambda: [10, 30])
    streak_length: List[float] = field(default_factory=lambda: [4.0, 16.0])
    streak_angle: List[float] = field(default_factory=lambda: [-20.0, 20.0])
    streak_width: List[float] = field(default_factory=lambda: [0.8, 1.6])
    streak_intensity: List[float] = field(default_factory=lambda: [0.3, 0.8])
    blur_sigma: float = 0.5

    # outputs
    out: str = "runs/latest"
    checkpoint: Optional[str] = None
    dump_intermediates: bool = False

    def __post_init__(self):
        self.mode = str(self.mode).lower()
        if self.mode not in TOPOLOGIES:
            raise ConfigError(f"mode must be one of {list(TOPOLOGIES)}, got: {self.mode}")
        if self.pooling not in POOLING_KINDS:
            raise ConfigError(f"pooling must be one of {list(POOLING_KINDS)}, got: {self.pooling}")
        for name in ("synthetic_count", "synthetic_size", "batch", "crop", "base_channels",
                     "encoder_depth", "msrb_per_level", "checkpoint_every", "workers"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive, got: {getattr(self, name)}")
        if self.epochs is not None and self.epochs <= 0:
            raise ConfigError(f"epochs must be positive, got: {self.epochs}")
        if self.schedule_scale <= 0:
            raise ConfigError(f"schedule_scale must be positive, got: {self.schedule_scale}")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError(f"holdout_fraction must be in [0, 1), got: {self.holdout_fraction}")
        for name in ("streak_count", "streak_length", "streak_angle", "streak_width", "streak_intensity"):
            value = getattr(self, name)
            if not isinstance(value, (list, tuple)) or len(value) != 2:
                raise ConfigError(f"{name} must be a [min, max] pair, got: {value}")
            setattr(self, name, list(value))

    @property
    def total_epochs(self) -> int:
        if self.epochs is not None:
            return int(self.epochs)
        return max(1, int(round(FULL_SCHEDULE_EPOCHS * self.schedule_scale)))

    def ablation_mode(self) -> AblationMode:
        return AblationMode(
            topology=self.mode,
            no_dilated_streams=not self.dilated_streams,
            no_physical_loss=not self.physical_loss,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            base_channels=self.base_channels,
            encoder_depth=self.encoder_depth,
            msrb_per_level=self.msrb_per_level,
            use_multiscale=self.multiscale,
            pooling=self.pooling,
            ablation=self.ablation_mode(),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    def schedule(self) -> LrSchedule:
        """The full schedule (decays at 60% and 80%) stretched over total_epochs."""
        return LrSchedule(initial=self.lr).stretched_to(self.total_epochs)

    def rain_params(self) -> RainParams:
        return RainParams(
            streak_count=tuple(int(v) for v in self.streak_count),
            length=tuple(float(v) for v in self.streak_length),
            angle=tuple(float(v) for v in self.streak_angle),
            width=tuple(float(v) for v in self.streak_width),
            intensity=tuple(float(v) for v in self.streak_intensity),
            blur_sigma=self.blur_sigma,
            seed=self.seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _known_keys() -> set:
    return {f.name for f in fields(RunConfig)}


_KEY_VALUE_LINE = re.compile(r"^\s*([A-Za-z_][\w-]*)\s*=\s*(.*?)\s*$")


def _content_lines(text: str) -> List[str]:
    return [line for line in text.splitlines() if line.strip() and not line.lstrip().startswith("#")]


def _is_key_value_text(text: str) -> bool:
    lines = _content_lines(text)
    return bool(lines) and all(_KEY_VALUE_LINE.match(line) for line in lines)


def _parse_key_value_text(text: str) -> Dict[str, Any]:
    """``key = value`` lines; each value is read as a YAML scalar or flow list."""
    values: Dict[str, Any] = {}
    for line in _content_lines(text):
        key, raw = _KEY_VALUE_LINE.match(line).groups()
        values[key] = yaml.safe_load(raw) if raw else None
    return values


def load_config(config_path: str | Path) -> Dict[str, Any]:
    """
    Load a flat configuration file.

    Either a YAML mapping or plain ``key = value`` lines. Keys mirror the
    command-line flag names; hyphens and underscores are interchangeable.

    Args:
        config_path: Path to the configuration file

    Returns:
        Mapping of normalized keys to values

    Raises:
        ConfigError: If the file is empty, malformed or has unknown keys
        FileNotFoundError: If the configuration file doesn't exist
    """
    config_path = Path(config_path)

    if not config_path.exists():
        raise FileNotFoundError(f"Configuration file not found: {config_path}")

    with open(config_path, 'r') as f:
        text = f.read()

    try:
        if _is_key_value_text(text):
            raw_config = _parse_key_value_text(text)
        else:
            raw_config = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"Failed to parse YAML configuration: {e}")

    if not raw_config:
        raise ConfigError("Configuration file is empty")
    if not isinstance(raw_config, dict):
        raise ConfigError("Configuration file must be a flat mapping of key: value pairs")

    values = {str(k).replace("-", "_"): v for k, v in raw_config.items()}
    unknown = sorted(set(values) - _known_keys())
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")
    return values


def resolve_config(
    file_values: Optional[Mapping[str, Any]] = None,
    flag_values: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Merge defaults, file values and command-line flags (flags win).

    Flags whose value is None were not given and do not override.

    Raises:
        ConfigError: If a value is invalid
    """
    merged: Dict[str, Any] = dict(file_values or {})
    known = _known_keys()
    for key, value in (flag_values or {}).items():
        if key in known and value is not None:
            merged[key] = value
    try:
        return RunConfig(**merged)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Failed to resolve configuration: {e}")


def dump_config(config: RunConfig, path: str | Path) -> Path:
    """Write the resolved configuration as YAML; loading it reproduces the run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        yaml.safe_dump(config.to_dict(), f, sort_keys=False)
    logger.info(f"Resolved configuration written to {path}")
    return path
