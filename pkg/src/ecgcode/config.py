"""Toolkit configuration file: one JSON object aggregating every sub-config."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import WORKING_RATE_HZ, AugmentConfig, StftConfig
from .evaluation import EvalConfig
from .grid_codec import GridConfig
from .model import ModelConfig, TrainConfig, model_config_from_dict

CONFIG_ENV = "ECGCODE_CONFIG"

_SECTIONS = {
    "grid": GridConfig,
    "stft": StftConfig,
    "augment": AugmentConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class ToolkitConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    stft: StftConfig = field(default_factory=StftConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    top_percent: float = 50.0
    sample_rate_hz: int = WORKING_RATE_HZ
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.top_percent <= 100:
            raise ValueError(f"top_percent must lie in (0, 100], got {self.top_percent}")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.model.n_intervals != self.grid.n_intervals:
            raise ValueError(
                f"model.n_intervals={self.model.n_intervals} differs from grid.n_intervals={self.grid.n_intervals}"
            )
        if self.model.n_mel != self.stft.n_mel:
            raise ValueError(f"model.n_mel={self.model.n_mel} differs from stft.n_mel={self.stft.n_mel}")
        if self.model.n_frames != self.stft.n_frames(self.grid.record_len):
            raise ValueError(
                f"model.n_frames={self.model.n_frames} but {self.grid.record_len} samples at hop "
                f"{self.stft.hop} give {self.stft.n_frames(self.grid.record_len)} frames"
            )
        self.stft.check_rate(self.sample_rate_hz)

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["model"]["blocks"] = [list(b) for b in self.model.blocks]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ToolkitConfig":
        if not isinstance(data, dict):
            raise ValueError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            section = _SECTIONS.get(key)
            if section is None:
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                raise ValueError(f"config section {key!r} must be an object")
            allowed = {f.name for f in dataclasses.fields(section)}
            bad = set(value) - allowed
            if bad:
                raise ValueError(f"unknown keys in {key!r}: {sorted(bad)}")
            try:
                kwargs[key] = model_config_from_dict(value) if section is ModelConfig else section(**value)
            except TypeError as exc:
                raise ValueError(f"invalid {key!r} section: {exc}") from exc
        return cls(**kwargs)

    def replace(self, **sections) -> "ToolkitConfig":
        return dataclasses.replace(self, **sections)


def load_config(path: str | os.PathLike | None = None) -> ToolkitConfig:
    """Read ``path``, else ``$ECGCODE_CONFIG``, else defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return ToolkitConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return ToolkitConfig.from_dict(data)


def save_config(config: ToolkitConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2))
