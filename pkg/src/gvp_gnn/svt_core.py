"""
Scalar/vector tuple primitives.

Dense numpy operations on paired scalar channels ``s`` (shape ``(..., n)``) and
vector channels ``V`` (shape ``(..., nu, 3)``, rows are geometric vectors).
Leading batch dimensions are carried through unchanged, so the same helpers
serve a single tuple, all nodes of a graph, or all edges of a batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation

DEFAULT_EPS = 1e-8
"""Regularizer of the safe row norm; the reported norm of a zero row equals it."""

ORTHOGONALITY_TOL = 1e-12


def _as_vectors(V: np.ndarray, name: str = "V") -> np.ndarray:
    array = np.asarray(V, dtype=np.float64)
    if array.ndim < 2 or array.shape[-1] != 3:
        raise ContractViolation(f"{name} must have shape (..., rows, 3), got {array.shape}")
    return array


@dataclass(frozen=True)
class SvTuple:
    """Scalar channels ``s`` and vector channels ``V`` of one or more entities."""

    s: np.ndarray
    """Scalar channels, shape (..., n)"""

    V: np.ndarray
    """Vector channels, shape (..., nu, 3)"""

    def __post_init__(self) -> None:
        s = np.asarray(self.s, dtype=np.float64)
        V = _as_vectors(self.V)
        if s.ndim < 1:
            raise ContractViolation("s must have at least one dimension")
        if s.shape[:-1] != V.shape[:-2]:
            raise ContractViolation(
                f"batch shapes of s {s.shape[:-1]} and V {V.shape[:-2]} disagree"
            )
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(V))):
            raise ContractViolation("SvTuple entries must be finite")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "V", V)

    @property
    def dims(self) -> tuple[int, int]:
        """Channel counts (n, nu)."""
        return self.s.shape[-1], self.V.shape[-2]

    def rotate(self, R: Orthogonal3) -> SvTuple:
        """Apply an orthogonal transform to the vector channels only."""
        return SvTuple(self.s, apply_orthogonal(R, self.V))


@dataclass(frozen=True)
class Orthogonal3:
    """A 3x3 orthogonal matrix (rotation or reflection)."""

    m: np.ndarray

    def __post_init__(self) -> None:
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ContractViolation(f"orthogonal matrix must be 3x3, got {m.shape}")
        if np.max(np.abs(m.T @ m - np.eye(3))) > ORTHOGONALITY_TOL:
            raise ContractViolation("matrix is not orthogonal: m^T m != I")
        if abs(abs(np.linalg.det(m)) - 1.0) > ORTHOGONALITY_TOL:
            raise ContractViolation("orthogonal matrix must have det = +-1")
        object.__setattr__(self, "m", m)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.m))

    @property
    def is_reflection(self) -> bool:
        return self.det < 0


def row_norms(V: np.ndarray, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Safe row-wise norm ``sqrt(sum_j V_ij^2 + eps^2)``, differentiable at zero."""
    if eps <= 0:
        raise ContractViolation(f"eps must be positive, got {eps}")
    V = _as_vectors(V)
    return np.sqrt(np.sum(V * V, axis=-1) + eps * eps)


def lin_map_vectors(W: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Channel-wise linear map ``W V``: (a, b) x (..., b, 3) -> (..., a, 3)."""
    W = np.asarray(W, dtype=np.float64)
    V = _as_vectors(V)
    if W.ndim != 2 or W.shape[1] != V.shape[-2]:
        raise ContractViolation(f"cannot map {V.shape[-2]} vector rows with W of shape {W.shape}")
    return np.matmul(W, V)


def lin_map_scalars(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Dense map of scalar channels ``x W^T + b``: (..., n) -> (..., m)."""
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ContractViolation(f"cannot map {x.shape[-1]} scalars with W of shape {W.shape}")
    out = x @ W.T
    if b is not None:
        out = out + np.asarray(b, dtype=np.float64)
    return out


def gate_rows(g: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Scale row i of ``V`` by ``g[i]``."""
    g = np.asarray(g, dtype=np.float64)
    V = _as_vectors(V)
    if g.shape != V.shape[:-1]:
        raise ContractViolation(f"gate shape {g.shape} does not match rows {V.shape[:-1]}")
    return g[..., None] * V


def apply_orthogonal(R: Orthogonal3, V: np.ndarray) -> np.ndarray:
    """Replace every row v of ``V`` by ``R v`` (i.e. ``V R^T``)."""
    if not isinstance(R, Orthogonal3):
        R = Orthogonal3(R)
    V = _as_vectors(V)
    return V @ R.m.T


def random_orthogonal(seed: int, allow_reflection: bool = True) -> Orthogonal3:
    """Draw a Haar-distributed orthogonal matrix, deterministic per seed.

    With ``allow_reflection`` both determinant signs occur with equal
    probability; without it the result is a proper rotation.
    """
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if not allow_reflection and np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return Orthogonal3(q)
