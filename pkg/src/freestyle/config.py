"""TOML configuration: one table per component, every key optional.

Precedence is flags > file > built-in defaults; unknown keys are rejected by
name and cross-field constraints are checked at load time.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import tomli

from .data import DatasetSpec
from .errors import ConfigError, StorageError
from .spectral import ModulationConfig
from .train import TrainConfig
from .unet import UNetConfig


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class StylizeDefaults:
    sigma_fraction: float = 0.958
    num_steps: int = 30
    seed: int = 0
    content_mode: str = "clean"
    clip_denoised: bool = True
    naive_delta: int = 850

    def __post_init__(self):
        if not 0 < self.sigma_fraction <= 1:
            raise ConfigError(f"stylize.sigma_fraction must lie in (0, 1], got {self.sigma_fraction}")
        if not isinstance(self.clip_denoised, bool):
            raise ConfigError(f"stylize.clip_denoised must be true or false, got {self.clip_denoised!r}")


@dataclass(frozen=True)
class ClassifierConfig:
    epochs: int = 30
    lr: float = 2e-3
    batch_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class Config:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    modulation: ModulationConfig = field(default_factory=ModulationConfig)
    stylize: StylizeDefaults = field(default_factory=StylizeDefaults)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            sec = getattr(self, f.name)
            out[f.name] = {k: _plain(v) for k, v in vars(sec).items()}
        return out

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "effective_config.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _plain(v: Any) -> Any:
    if isinstance(v, (tuple, list, frozenset, set)):
        return sorted(v) if isinstance(v, (frozenset, set)) else list(v)
    return v


_TYPES = {"data": DatasetSpec, "unet": UNetConfig, "train": TrainConfig, "classifier": ClassifierConfig,
          "modulation": ModulationConfig, "stylize": StylizeDefaults, "schedule": ScheduleConfig}


def build_config(doc: Mapping[str, Mapping[str, Any]]) -> Config:
    sections = {}
    for name, body in doc.items():
        if name not in _TYPES:
            raise ConfigError(f"unknown config section '{name}'")
        if not isinstance(body, Mapping):
            raise ConfigError(f"config section '{name}' must be a table")
        known = {f.name for f in dataclasses.fields(_TYPES[name])}
        for key in body:
            if key not in known:
                raise ConfigError(f"unknown config key '{name}.{key}'")
        kwargs = dict(body)
        if name == "modulation" and kwargs.get("apply_levels") is not None:
            kwargs["apply_levels"] = frozenset(kwargs["apply_levels"])
        try:
            sections[name] = _TYPES[name](**kwargs)
        except TypeError as exc:
            raise ConfigError(f"config section '{name}': {exc}") from exc
    # style-class count follows the dataset unless pinned explicitly
    if "unet" not in doc or "num_style_classes" not in doc["unet"]:
        n = sections.get("data", DatasetSpec()).num_styles
        sections["unet"] = dataclasses.replace(sections.get("unet", UNetConfig()), num_style_classes=n)
    cfg = Config(**sections)
    validate(cfg)
    return cfg


def validate(cfg: Config) -> None:
    cfg.unet.check_image_size(cfg.data.image_size, cfg.data.image_size)
    if cfg.data.num_styles != cfg.unet.num_style_classes:
        raise ConfigError(
            f"data.num_styles={cfg.data.num_styles} must equal unet.num_style_classes={cfg.unet.num_style_classes}")
    if cfg.modulation.apply_levels is not None and not cfg.modulation.apply_levels <= set(range(cfg.unet.levels)):
        raise ConfigError(f"modulation.apply_levels must be within [0, {cfg.unet.levels})")


def load_config(path: Optional[str | Path]) -> Config:
    if path is None:
        return build_config({})
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text())
    except OSError as exc:
        raise StorageError(f"{path}: cannot read config ({exc})") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
    return build_config(doc)


def override(cfg: Config, section: str, **values) -> Config:
    """Apply non-None flag values on top of ``cfg``."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    new = dataclasses.replace(getattr(cfg, section), **values)
    out = dataclasses.replace(cfg, **{section: new})
    validate(out)
    return out
