"""
Atomic structures and their radius graphs.

Atoms become nodes featurized by a one-hot element encoding; every ordered
pair closer than the cutoff becomes a directed edge j -> i featurized by the
unit vector from j towards i and a Gaussian RBF encoding of the distance.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation, GraphError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_CUTOFF = 4.5
"""Edge cutoff in Angstrom; pairs at exactly the cutoff are not connected"""

DEFAULT_RBF_COUNT = 16
COINCIDENT_TOL = 1e-6

DEFAULT_VOCAB = ("H", "C", "N", "O", "F", "P", "S", "Cl", "Se", "Br", "I")


def _normalize_symbol(symbol: str) -> str:
    return symbol.strip().capitalize()


@dataclass(frozen=True)
class AtomRecord:
    """One atom of a structure."""

    element: str
    """Chemical symbol as written in the input"""

    position: tuple[float, float, float]
    """Cartesian coordinates in Angstrom"""

    readout_tag: bool = False
    """Marks a readout atom (e.g. an alpha carbon)"""

    def __post_init__(self) -> None:
        if not self.element.strip():
            raise ContractViolation("atom element must be non-empty")
        position = tuple(float(c) for c in self.position)
        if len(position) != 3 or not all(math.isfinite(c) for c in position):
            raise ContractViolation(f"atom position must be 3 finite reals, got {self.position}")
        object.__setattr__(self, "position", position)

    def translated(self, t: Sequence[float]) -> AtomRecord:
        x, y, z = self.position
        return AtomRecord(self.element, (x + t[0], y + t[1], z + t[2]), self.readout_tag)


@dataclass(frozen=True)
class ElementVocab:
    """Recognized element symbols plus an implicit trailing "other" bucket."""

    symbols: tuple[str, ...] = DEFAULT_VOCAB
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        normalized = tuple(_normalize_symbol(s) for s in self.symbols)
        if len(set(normalized)) != len(normalized):
            raise ContractViolation(f"duplicate symbols in vocabulary: {self.symbols}")
        object.__setattr__(self, "symbols", normalized)
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(normalized)})

    @property
    def width(self) -> int:
        """One-hot width, including the "other" bucket."""
        return len(self.symbols) + 1

    def index(self, symbol: str) -> int:
        return self._index.get(_normalize_symbol(symbol), len(self.symbols))

    def one_hot(self, elements: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(elements), self.width))
        out[np.arange(len(elements)), [self.index(e) for e in elements]] = 1.0
        return out


@dataclass(frozen=True, eq=False)
class MolGraph:
    """A featurized radius graph; edge k points from ``src[k]`` to ``dst[k]``."""

    elements: tuple[str, ...]
    positions: np.ndarray
    """(N, 3) Angstrom"""

    readout: np.ndarray
    """(N,) bool readout tags"""

    node_scalars: np.ndarray
    """(N, vocab width) one-hot"""

    src: np.ndarray
    dst: np.ndarray
    unit_vectors: np.ndarray
    """(E, 3) unit vectors from src towards dst"""

    rbf: np.ndarray
    """(E, rbf count) distance encodings"""

    cutoff: float
    vocab: ElementVocab

    @property
    def num_nodes(self) -> int:
        return len(self.elements)

    @property
    def num_edges(self) -> int:
        return int(self.src.shape[0])

    def atoms(self) -> list[AtomRecord]:
        return [
            AtomRecord(e, tuple(p), bool(r))
            for e, p, r in zip(self.elements, self.positions.tolist(), self.readout)
        ]


def parse_xyz(text: str) -> list[AtomRecord]:
    """Parse XYZ text: atom count, comment line, then ``symbol x y z [tag]`` lines."""
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError("missing atom count", line=1)
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"invalid atom count {lines[0].strip()!r}", line=1) from None
    if count <= 0:
        raise ParseError(f"atom count must be positive, got {count}", line=1)

    atoms: list[AtomRecord] = []
    for offset in range(count):
        number = offset + 3
        if number > len(lines) or not lines[number - 1].strip():
            raise ParseError(f"expected {count} atoms, found {offset}", line=number)
        fields = lines[number - 1].split()
        if len(fields) not in (4, 5):
            raise ParseError(f"expected 'symbol x y z [tag]', got {len(fields)} fields", line=number)
        try:
            coords = tuple(float(v) for v in fields[1:4])
        except ValueError:
            raise ParseError(f"malformed coordinate in {fields[1:4]}", line=number) from None
        if not all(math.isfinite(c) for c in coords):
            raise ParseError("coordinates must be finite", line=number)
        tag = False
        if len(fields) == 5:
            if fields[4] not in ("0", "1"):
                raise ParseError(f"readout tag must be 0 or 1, got {fields[4]!r}", line=number)
            tag = fields[4] == "1"
        atoms.append(AtomRecord(fields[0], coords, tag))

    for number in range(count + 3, len(lines) + 1):
        if lines[number - 1].strip():
            raise ParseError(f"expected {count} atoms, found more", line=number)
    return atoms


def strip_hydrogens(atoms: Sequence[AtomRecord]) -> list[AtomRecord]:
    """Drop hydrogen atoms, keeping the order of the rest."""
    return [atom for atom in atoms if atom.element.strip().upper() != "H"]


def _positions(atoms: Sequence[AtomRecord]) -> np.ndarray:
    return np.array([atom.position for atom in atoms], dtype=np.float64).reshape(-1, 3)


def build_radius_graph(
    atoms: Sequence[AtomRecord], cutoff: float = DEFAULT_CUTOFF
) -> tuple[np.ndarray, np.ndarray]:
    """Both directed edges of every pair closer than ``cutoff``, sorted by (src, dst)."""
    if not atoms:
        raise GraphError("empty graph: no atoms")
    if cutoff <= 0:
        raise ContractViolation(f"cutoff must be positive, got {cutoff}")
    pos = _positions(atoms)
    dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    mask = dist < cutoff
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return src.astype(np.intp), dst.astype(np.intp)


def rbf_centers(d_min: float = 0.0, d_max: float = DEFAULT_CUTOFF, count: int = DEFAULT_RBF_COUNT) -> np.ndarray:
    return np.linspace(d_min, d_max, count)


def rbf_encode(
    d: float | np.ndarray,
    d_min: float = 0.0,
    d_max: float = DEFAULT_CUTOFF,
    count: int = DEFAULT_RBF_COUNT,
) -> np.ndarray:
    """Gaussian responses ``exp(-(d - mu_k)^2 / (2 gamma^2))``, gamma = (d_max - d_min) / count."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ContractViolation("distances must be non-negative")
    mu = rbf_centers(d_min, d_max, count)
    gamma = (d_max - d_min) / count
    return np.exp(-((d[..., None] - mu) ** 2) / (2.0 * gamma**2))


def featurize(
    atoms: Sequence[AtomRecord],
    vocab: ElementVocab | None = None,
    cutoff: float = DEFAULT_CUTOFF,
    rbf_count: int = DEFAULT_RBF_COUNT,
) -> MolGraph:
    """Build the featurized radius graph of ``atoms``.

    The RBF centers span [0, cutoff], so with the default cutoff they span
    [0, 4.5]. A larger cutoff stretches the centers over the longer edges.
    """
    vocab = vocab or ElementVocab()
    src, dst = build_radius_graph(atoms, cutoff)
    pos = _positions(atoms)
    delta = pos[dst] - pos[src]
    dist = np.linalg.norm(delta, axis=-1)
    close = np.flatnonzero(dist < COINCIDENT_TOL)
    if close.size:
        k = close[0]
        raise GraphError(f"atoms {src[k]} and {dst[k]} coincide; edge direction is undefined")
    graph = MolGraph(
        elements=tuple(atom.element for atom in atoms),
        positions=pos,
        readout=np.array([atom.readout_tag for atom in atoms], dtype=bool),
        node_scalars=vocab.one_hot([atom.element for atom in atoms]),
        src=src,
        dst=dst,
        unit_vectors=delta / dist[:, None],
        rbf=rbf_encode(dist, 0.0, cutoff, rbf_count),
        cutoff=cutoff,
        vocab=vocab,
    )
    logger.debug(f"Featurized graph: {graph.num_nodes} nodes, {graph.num_edges} edges")
    return graph
