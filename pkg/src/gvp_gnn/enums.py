"""
GVP-GNN enums.

This module contains the selector enumerations used by layer, model and training configs.
"""

import enum


class Activation(str, enum.Enum):
    """Pointwise activations available to the scalar and pre-gate pathways."""

    RELU = "relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class GvpVariant(str, enum.Enum):
    """Vector nonlinearity of a GVP."""

    GATED = "gated"
    ORIGINAL = "original"


class TaskMode(str, enum.Enum):
    """How node embeddings become the dense head's input."""

    POOL = "pool"
    NODE_READOUT = "node_readout"
    PAIRED = "paired"


class LossKind(str, enum.Enum):
    """Training objectives."""

    MSE = "mse"
    CROSS_ENTROPY = "cross_entropy"


class MetricKind(str, enum.Enum):
    """Evaluation metrics."""

    MAE = "mae"
    RMSE = "rmse"
    AUROC = "auroc"
    SPEARMAN = "spearman"


class TransformKind(str, enum.Enum):
    """Transform classes applied by the equivariance audit."""

    ROTATION = "rotation"
    REFLECTION = "reflection"
    TRANSLATION = "translation"
    PERMUTATION = "permutation"
