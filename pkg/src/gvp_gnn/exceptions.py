"""
GVP-GNN exceptions.

This module contains custom exceptions raised across the library. The CLI maps
them onto its exit codes.
"""

from __future__ import annotations


class GvpError(Exception):
    """Base exception for gvp-gnn errors."""

    pass


class ContractViolation(GvpError, ValueError):
    """Raised when an operation's precondition (shape, range, registry) does not hold."""

    pass


class ParseError(GvpError):
    """Raised when input text or a graph file cannot be parsed.

    ``line`` is set for line-oriented formats (XYZ, config text) and ``path``
    for JSON documents (e.g. ``/nodes/3/pos``).
    """

    def __init__(self, message: str, line: int | None = None, path: str | None = None) -> None:
        self.line = line
        self.path = path
        if line is not None:
            message = f"line {line}: {message}"
        elif path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class GraphError(GvpError):
    """Raised when a structure cannot be turned into a usable graph."""

    pass


class NumericError(GvpError):
    """Raised when training produces a non-finite loss."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None) -> None:
        self.epoch = epoch
        self.batch = batch
        super().__init__(message)


class UndefinedMetricError(GvpError):
    """Raised when a metric is undefined for the given data (e.g. single-class AUROC)."""

    pass


class CheckpointError(GvpError):
    """Raised when a checkpoint file is malformed, truncated or of the wrong version."""

    pass


class ShapeMismatchError(CheckpointError):
    """Raised when a stored tensor does not fit the model it is loaded into."""

    def __init__(self, message: str, tensor: str) -> None:
        self.tensor = tensor
        super().__init__(message)


class TransferError(GvpError):
    """Raised when transfer surgery cannot copy a requested tensor."""

    pass


class PropertyViolation(GvpError):
    """Raised when a checked property (equivariance, demo threshold) fails."""

    pass
