"""
gvp-gnn - Geometric vector perceptrons and equivariant graph networks

This library provides vector-gated GVPs, the GVP-GNN for atomic structures, a
small reverse-mode differentiation engine, training with transfer surgery and
equivariance auditing.
"""

from importlib.metadata import version

try:
    __version__ = version("gvp-gnn")
except Exception:  # noqa: BLE001 - fallback when package metadata is unavailable
    __version__ = "0.0.0+unknown"

from .enums import Activation, GvpVariant, LossKind, MetricKind, TaskMode, TransformKind
from .exceptions import (
    CheckpointError,
    ContractViolation,
    GraphError,
    GvpError,
    NumericError,
    ParseError,
    PropertyViolation,
    ShapeMismatchError,
    TransferError,
    UndefinedMetricError,
)
from .gnn import GvpGnnModel, forward, forward_pair
from .gvp_layer import GvpConfig, GvpParams, gvp_forward, gvp_forward_original, init_params
from .models import History, ModelConfig, Sample, TrainConfig
from .mol_graph import AtomRecord, MolGraph, featurize, parse_xyz
from .run_config import RunConfig
from .svt_core import Orthogonal3, SvTuple

__all__ = [
    "__version__",
    "Activation",
    "AtomRecord",
    "CheckpointError",
    "ContractViolation",
    "GraphError",
    "GvpConfig",
    "GvpError",
    "GvpGnnModel",
    "GvpParams",
    "GvpVariant",
    "History",
    "LossKind",
    "MetricKind",
    "ModelConfig",
    "MolGraph",
    "NumericError",
    "Orthogonal3",
    "ParseError",
    "PropertyViolation",
    "RunConfig",
    "Sample",
    "ShapeMismatchError",
    "SvTuple",
    "TaskMode",
    "TrainConfig",
    "TransferError",
    "TransformKind",
    "UndefinedMetricError",
    "featurize",
    "forward",
    "forward_pair",
    "gvp_forward",
    "gvp_forward_original",
    "init_params",
    "parse_xyz",
]
