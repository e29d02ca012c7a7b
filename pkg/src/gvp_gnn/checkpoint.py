"""
Checkpoint codec and transfer surgery.

Layout (all integers u32 little-endian)::

    b"GVPC" | version | config length | config text (UTF-8, "key = value" lines)
    then per tensor: name length | name | rank | dims... | float64 LE payload

Tensors appear in the model's canonical parameter order. Payloads are raw
IEEE-754 so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import fnmatch
import logging
import struct
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import parse_config_text, render_config_text
from .exceptions import CheckpointError, ParseError, ShapeMismatchError, TransferError
from .gnn import GvpGnnModel, init_model_params, parameter_shapes
from .models import ModelConfig

logger = logging.getLogger(__name__)

MAGIC = b"GVPC"
FORMAT_VERSION = 1

DEFAULT_TRANSFER_PATTERNS = ("embed.*", "layer.0.*", "layer.1.*")
"""The input embedding and the first two message-passing layers"""


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """A decoded checkpoint: the stored config and its named tensors."""

    config: ModelConfig
    tensors: dict[str, np.ndarray]


def serialize_checkpoint(model: GvpGnnModel) -> bytes:
    config_text = render_config_text(model.config.to_mapping()).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config_text)), config_text]
    for name, value in model.params.items():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack(f"<I{value.ndim}I", value.ndim, *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)

    def take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise CheckpointError(f"truncated checkpoint: needed {size} bytes at offset {self.pos}")
        chunk = self.data[self.pos : self.pos + size]
        self.pos += size
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def parse_checkpoint(data: bytes) -> Checkpoint:
    """Decode checkpoint bytes; any structural problem raises CheckpointError."""
    reader = _Reader(data)
    magic = reader.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config_text = reader.take(reader.u32()).decode("utf-8")
        config = ModelConfig.from_mapping(parse_config_text(config_text))
    except (UnicodeDecodeError, ParseError, ValueError) as e:
        raise CheckpointError(f"invalid stored config: {e}") from e

    tensors: dict[str, np.ndarray] = {}
    while not reader.done:
        try:
            name = reader.take(reader.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError("invalid tensor name") from e
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        payload = reader.take(8 * count)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Checkpoint(config, tensors)


def check_tensors(tensors: dict[str, np.ndarray], cfg: ModelConfig) -> None:
    """Raise ShapeMismatchError naming the first tensor that does not fit ``cfg``."""
    for name, shape in parameter_shapes(cfg).items():
        if name not in tensors:
            raise ShapeMismatchError(f"checkpoint lacks tensor {name}", name)
        if tensors[name].shape != shape:
            raise ShapeMismatchError(
                f"tensor {name} has shape {tensors[name].shape}, model expects {shape}", name
            )
    extra = [name for name in tensors if name not in parameter_shapes(cfg)]
    if extra:
        raise ShapeMismatchError(f"checkpoint has unexpected tensor {extra[0]}", extra[0])


def save_checkpoint(model: GvpGnnModel, path: str | Path) -> None:
    data = serialize_checkpoint(model)
    Path(path).write_bytes(data)
    logger.info(f"Saved checkpoint {path} ({len(model.params)} tensors, {len(data)} bytes)")


def read_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    return parse_checkpoint(data)


def load_checkpoint(path: str | Path, expected_cfg: ModelConfig | None = None) -> GvpGnnModel:
    """Load a model; tensors are validated against ``expected_cfg`` when given."""
    checkpoint = read_checkpoint(path)
    cfg = expected_cfg or checkpoint.config
    check_tensors(checkpoint.tensors, cfg)
    logger.info(f"Loaded checkpoint {path}")
    return GvpGnnModel(cfg, checkpoint.tensors)


@dataclass(frozen=True)
class TransferReport:
    transferred: tuple[str, ...]
    reinitialized: tuple[str, ...]

    def render(self) -> str:
        lines = [f"transferred {len(self.transferred)}", f"reinitialized {len(self.reinitialized)}"]
        lines += [f"copy {name}" for name in self.transferred]
        return "\n".join(lines) + "\n"


def _matches(name: str, pattern: str) -> bool:
    if any(c in pattern for c in "*?["):
        return fnmatch.fnmatchcase(name, pattern)
    return name == pattern or name.startswith(pattern + ".")


def transfer_load(
    source: Checkpoint | GvpGnnModel,
    model: GvpGnnModel,
    patterns: Sequence[str] = DEFAULT_TRANSFER_PATTERNS,
) -> tuple[GvpGnnModel, TransferReport]:
    """Copy the tensors matching ``patterns`` from ``source``; re-initialize everything else.

    Re-initialized tensors are drawn from ``model.config.seed`` exactly as a
    fresh model would be. A bare pattern such as ``embed`` matches the name
    itself and everything below it.
    """
    tensors = source.tensors if isinstance(source, Checkpoint) else source.params
    names = list(parameter_shapes(model.config))
    for pattern in patterns:
        if not any(_matches(name, pattern) for name in names):
            raise TransferError(f"pattern {pattern!r} matches no model tensor")

    params = init_model_params(model.config)
    transferred = []
    for name in names:
        if not any(_matches(name, pattern) for pattern in patterns):
            continue
        if name not in tensors:
            raise TransferError(f"source has no tensor {name}")
        if tensors[name].shape != params[name].shape:
            raise ShapeMismatchError(
                f"cannot transfer {name}: source shape {tensors[name].shape}, "
                f"model shape {params[name].shape}",
                name,
            )
        params[name] = np.array(tensors[name], dtype=np.float64, copy=True)
        transferred.append(name)

    report = TransferReport(
        tuple(transferred), tuple(name for name in names if name not in transferred)
    )
    logger.info(
        f"Transferred {len(report.transferred)} tensors, re-initialized {len(report.reinitialized)}"
    )
    return GvpGnnModel(model.config, params), report
