"""
Configuration and record dataclasses.

This module contains the typed model and training configurations, the
per-epoch training History and dataset samples. Configurations convert to and
from the ``key = value`` mapping used by run-config files and checkpoints.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np

from .config import (
    _parse_bool,
    _parse_enum,
    _parse_float,
    _parse_int,
    _parse_non_negative_int,
    _parse_positive_int,
    _parse_rate,
    _parse_str_list,
)
from .enums import GvpVariant, LossKind, MetricKind, TaskMode
from .exceptions import ContractViolation
from .mol_graph import DEFAULT_CUTOFF, DEFAULT_RBF_COUNT, DEFAULT_VOCAB, ElementVocab, MolGraph


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(value)
    if hasattr(value, "value"):
        return str(value.value)
    return str(value)


class _ConfigMixin:
    """Conversion between a frozen config dataclass and string mappings."""

    _PARSERS: ClassVar[dict[str, Callable[[str, str], Any]]]

    @classmethod
    def keys(cls) -> tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))  # type: ignore[arg-type]

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]):
        """Build a config from string values; missing keys keep their defaults."""
        unknown = set(values) - set(cls.keys())
        if unknown:
            raise ValueError(f"Unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
        kwargs = {key: cls._PARSERS[key](key, raw) for key, raw in values.items()}
        return cls(**kwargs)

    def to_mapping(self) -> dict[str, str]:
        return {key: _render(getattr(self, key)) for key in self.keys()}


@dataclass(frozen=True)
class ModelConfig(_ConfigMixin):
    """GVP-GNN architecture and featurization."""

    node_scalar: int = 100
    """Scalar channels of node embeddings"""

    node_vector: int = 16
    """Vector channels of node embeddings"""

    edge_scalar: int = DEFAULT_RBF_COUNT
    """Scalar edge channels (RBF count)"""

    edge_vector: int = 1
    """Vector edge channels (the unit vector)"""

    num_layers: int = 5
    msg_gvps: int = 3
    ff_gvps: int = 2

    ff_scalar: int = 400
    """Hidden scalar width of the feed-forward GVPs"""

    ff_vector: int = 32
    """Hidden vector width of the feed-forward GVPs"""

    dropout_rate: float = 0.1
    head_hidden: int = 100
    output_dim: int = 1
    task_mode: TaskMode = TaskMode.POOL

    pair_embedding: TaskMode = TaskMode.POOL
    """Per-structure embedding in paired mode: pool or node_readout"""

    variant: GvpVariant = GvpVariant.GATED
    vocab: tuple[str, ...] = DEFAULT_VOCAB
    cutoff: float = DEFAULT_CUTOFF
    keep_hydrogens: bool = False

    seed: int = 0
    """Initialization seed; transfer surgery re-initializes from it"""

    _PARSERS: ClassVar[dict[str, Callable[[str, str], Any]]] = {
        "node_scalar": _parse_positive_int,
        "node_vector": _parse_positive_int,
        "edge_scalar": _parse_positive_int,
        "edge_vector": _parse_positive_int,
        "num_layers": _parse_non_negative_int,
        "msg_gvps": _parse_positive_int,
        "ff_gvps": _parse_positive_int,
        "ff_scalar": _parse_positive_int,
        "ff_vector": _parse_positive_int,
        "dropout_rate": _parse_rate,
        "head_hidden": _parse_positive_int,
        "output_dim": _parse_positive_int,
        "task_mode": lambda k, v: _parse_enum(k, v, TaskMode),
        "pair_embedding": lambda k, v: _parse_enum(k, v, TaskMode),
        "variant": lambda k, v: _parse_enum(k, v, GvpVariant),
        "vocab": lambda k, v: _parse_str_list(v),
        "cutoff": _parse_float,
        "keep_hydrogens": _parse_bool,
        "seed": _parse_int,
    }

    def __post_init__(self) -> None:
        if self.edge_scalar < 2:
            raise ContractViolation("edge_scalar (RBF count) must be >= 2")
        if self.edge_vector != 1:
            raise ContractViolation("edge features carry exactly one vector channel")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise ContractViolation(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.cutoff <= 0:
            raise ContractViolation(f"cutoff must be positive, got {self.cutoff}")
        if self.pair_embedding == TaskMode.PAIRED:
            raise ContractViolation("pair_embedding must be pool or node_readout")
        object.__setattr__(self, "vocab", tuple(self.vocab))
        ElementVocab(self.vocab)

    @property
    def element_vocab(self) -> ElementVocab:
        return ElementVocab(self.vocab)

    @property
    def in_scalar(self) -> int:
        return len(self.vocab) + 1

    @property
    def head_input(self) -> int:
        return 2 * self.node_scalar if self.task_mode == TaskMode.PAIRED else self.node_scalar

    @property
    def graphs_per_sample(self) -> int:
        return 2 if self.task_mode == TaskMode.PAIRED else 1


@dataclass(frozen=True)
class TrainConfig(_ConfigMixin):
    """Optimizer and loop settings."""

    lr: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 10

    max_steps: int | None = None
    """Optional cap on optimizer steps across all epochs"""

    seed: int = 0
    loss: LossKind = LossKind.MSE
    metric: MetricKind | None = MetricKind.MAE
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    _PARSERS: ClassVar[dict[str, Callable[[str, str], Any]]] = {
        "lr": _parse_float,
        "batch_size": _parse_positive_int,
        "max_epochs": _parse_non_negative_int,
        "max_steps": lambda k, v: None if v.lower() in ("", "none") else _parse_positive_int(k, v),
        "seed": _parse_int,
        "loss": lambda k, v: _parse_enum(k, v, LossKind),
        "metric": lambda k, v: None if v.lower() in ("", "none") else _parse_enum(k, v, MetricKind),
        "beta1": _parse_float,
        "beta2": _parse_float,
        "adam_eps": _parse_float,
    }

    def __post_init__(self) -> None:
        if not self.lr >= 0:
            raise ContractViolation(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ContractViolation(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractViolation("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ContractViolation("adam_eps must be positive")

    def to_mapping(self) -> dict[str, str]:
        values = super().to_mapping()
        values["max_steps"] = "none" if self.max_steps is None else str(self.max_steps)
        values["metric"] = "none" if self.metric is None else self.metric.value
        return values


@dataclass(frozen=True, eq=False)
class Sample:
    """One dataset entry: one graph (two for paired tasks) and its targets."""

    graphs: tuple[MolGraph, ...]
    target: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, dtype=np.float64)))


HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "metric")


@dataclass
class History:
    """Per-epoch learning curve."""

    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    metric: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def append(self, train_loss: float, val_loss: float, metric: float) -> None:
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.metric.append(metric)

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(HISTORY_HEADER)
        for epoch in range(self.epochs):
            writer.writerow(
                [epoch + 1]
                + [repr(float(v)) for v in (self.train_loss[epoch], self.val_loss[epoch], self.metric[epoch])]
            )
        return buffer.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> History:
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != HISTORY_HEADER:
            raise ValueError(f"history CSV must start with header {','.join(HISTORY_HEADER)}")
        history = cls()
        for row in rows[1:]:
            if not row:
                continue
            history.append(float(row[1]), float(row[2]), float(row[3]))
        return history

    def column(self, name: str) -> list[float]:
        if name not in HISTORY_HEADER[1:]:
            raise ValueError(f"unknown history column {name}")
        return list(getattr(self, name))

    def has_validation(self) -> bool:
        return any(not math.isnan(v) for v in self.val_loss)
