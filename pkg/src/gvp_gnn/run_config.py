"""
Run configuration.

This module resolves the model and training settings of one CLI run from a
``key = value`` config file and flag overrides (flags win). A ``seed`` key
seeds both parameter initialization and the training streams.
"""

from __future__ import annotations

from collections.abc import Mapping
from pathlib import Path
from typing import Any

from .config import parse_config_text, render_config_text
from .exceptions import ParseError
from .models import ModelConfig, TrainConfig


def known_keys() -> tuple[str, ...]:
    keys = list(ModelConfig.keys())
    keys += [key for key in TrainConfig.keys() if key not in keys]
    return tuple(keys)


class RunConfig:
    """Model and training configuration for one run."""

    def __init__(self, model: ModelConfig | None = None, train: TrainConfig | None = None) -> None:
        self.model = model or ModelConfig()
        self.train = train or TrainConfig(seed=self.model.seed)

    @classmethod
    def from_values(cls, values: Mapping[str, str]) -> RunConfig:
        unknown = sorted(set(values) - set(known_keys()))
        if unknown:
            raise ParseError(f"unknown config key(s): {', '.join(unknown)}")
        model_keys = set(ModelConfig.keys())
        train_keys = set(TrainConfig.keys())
        try:
            model = ModelConfig.from_mapping({k: v for k, v in values.items() if k in model_keys})
            train = TrainConfig.from_mapping({k: v for k, v in values.items() if k in train_keys})
        except ValueError as e:
            raise ParseError(str(e)) from None
        return cls(model, train)

    @classmethod
    def resolve(
        cls,
        text: str | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> RunConfig:
        """Config text first, then every override that is not None."""
        values = parse_config_text(text) if text else {}
        for key, value in (overrides or {}).items():
            if value is not None:
                values[key] = value.value if hasattr(value, "value") else str(value)
        return cls.from_values(values)

    @classmethod
    def from_file(cls, path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
        text = None
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as e:
                raise ParseError(f"cannot read config: {e.strerror}", path=str(path)) from e
        return cls.resolve(text, overrides)

    def to_mapping(self) -> dict[str, str]:
        values = self.model.to_mapping()
        for key, value in self.train.to_mapping().items():
            values.setdefault(key, value)
        return values

    def render(self) -> str:
        return render_config_text(self.to_mapping())

    def __repr__(self) -> str:
        return (
            f"RunConfig(layers={self.model.num_layers}, task_mode={self.model.task_mode.value}, "
            f"lr={self.train.lr}, batch_size={self.train.batch_size}, "
            f"max_epochs={self.train.max_epochs}, seed={self.train.seed})"
        )
