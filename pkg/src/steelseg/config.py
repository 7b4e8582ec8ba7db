"""Run configuration: one TOML file with ``[data]``, ``[augmentation]``, ``[model]``, ``[train]`` and ``[output]``."""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli
import tomli_w

from .model import ModelConfig
from .training import TrainConfig

DATA_ROOT_ENV = "STEELSEG_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    data_dir: str = ""
    csv: str = "train.csv"
    image_dir: str = "train_images"
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0

    def resolved_dir(self) -> Path:
        root = self.data_dir or os.environ.get(DATA_ROOT_ENV, "")
        if not root:
            raise ConfigError(f"no data directory: set [data].data_dir or ${DATA_ROOT_ENV}")
        return Path(root)

    @property
    def csv_path(self) -> Path:
        p = Path(self.csv)
        return p if p.is_absolute() else self.resolved_dir() / p

    @property
    def image_path(self) -> Path:
        p = Path(self.image_dir)
        return p if p.is_absolute() else self.resolved_dir() / p


@dataclass
class AugmentConfig:
    enabled: bool = True
    action_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    rotation_range: float = 15.0
    crop_size: tuple[int, int] = (256, 256)
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrained: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    run_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return {
            "data": {**asdict(self.data), "split_ratios": list(self.data.split_ratios)},
            "augmentation": {
                **asdict(self.augmentation),
                "action_weights": list(self.augmentation.action_weights),
                "crop_size": list(self.augmentation.crop_size),
            },
            "model": {**self.model.to_dict(), "pretrained": self.pretrained},
            "train": self.train.to_dict(),
            "output": {"run_dir": self.run_dir},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"data", "augmentation", "model", "train", "output"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = dict(d.get("model", {}))
        pretrained = bool(model.pop("pretrained", False))
        try:
            return cls(
                data=_build(DataConfig, d.get("data", {}), "data"),
                augmentation=_build(AugmentConfig, d.get("augmentation", {}), "augmentation"),
                model=_build(ModelConfig, model, "model"),
                pretrained=pretrained,
                train=_build(TrainConfig, d.get("train", {}), "train"),
                run_dir=d.get("output", {}).get("run_dir", "runs/default"),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {sorted(unknown)}")
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**values)


def parse_override(text: str) -> tuple[list[str], object]:
    """``section.key=value`` with ``value`` parsed as a TOML literal (bare words are strings)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key.strip().split("."), value


def load_config(path: str | Path | None = None, overrides=()) -> RunConfig:
    d: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                d = tomli.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for text in overrides:
        keys, value = parse_override(text)
        node = d
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return RunConfig.from_dict(d)
