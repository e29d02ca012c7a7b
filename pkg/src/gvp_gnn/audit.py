"""
Equivariance auditing.

``check_equivariance`` transforms a structure with seeded random rotations,
reflections, translations and atom permutations and compares, in eval mode,
the model outputs (which must be invariant) and every layer's node states
(scalars invariant, vectors transformed along, rows permuted along).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .enums import TaskMode, TransformKind
from .gnn import GvpGnnModel, forward, forward_pair, node_states
from .mol_graph import AtomRecord, MolGraph, featurize
from .svt_core import Orthogonal3, SvTuple, apply_orthogonal, random_orthogonal

logger = logging.getLogger(__name__)

DEFAULT_TRIALS = 100
DEFAULT_TOL = 1e-10
MAX_TRANSLATION = 10.0


def relative_deviation(actual: np.ndarray, expected: np.ndarray) -> float:
    """``max|actual - expected| / max|expected|``, guarded against an all-zero reference."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if expected.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(expected))), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(actual - expected))) / scale


@dataclass(frozen=True)
class TransformResult:
    kind: TransformKind
    output_deviation: float
    state_deviation: float
    worst_seed: int

    @property
    def deviation(self) -> float:
        return max(self.output_deviation, self.state_deviation)


@dataclass(frozen=True)
class EquivarianceReport:
    results: tuple[TransformResult, ...]
    tol: float
    trials: int

    @property
    def worst(self) -> TransformResult:
        return max(self.results, key=lambda r: r.deviation)

    @property
    def ok(self) -> bool:
        return all(r.deviation <= self.tol for r in self.results)

    def render(self) -> str:
        lines = [
            f"{r.kind.value} output {r.output_deviation:.3e} states {r.state_deviation:.3e}"
            for r in self.results
        ]
        worst = self.worst
        lines.append(f"max_deviation {worst.deviation:.3e}")
        lines.append(f"worst_transform {worst.kind.value} seed {worst.worst_seed}")
        lines.append(f"tol {self.tol:.3e}")
        lines.append("PASS" if self.ok else "FAIL")
        return "\n".join(lines) + "\n"


def rebuild(graph: MolGraph, atoms: list[AtomRecord]) -> MolGraph:
    """Featurize ``atoms`` exactly as ``graph`` was featurized."""
    return featurize(atoms, graph.vocab, graph.cutoff, int(graph.rbf.shape[1]))


def transform_positions(graph: MolGraph, R: Orthogonal3) -> MolGraph:
    positions = apply_orthogonal(R, graph.positions)
    atoms = [
        AtomRecord(a.element, tuple(p), a.readout_tag)
        for a, p in zip(graph.atoms(), positions.tolist())
    ]
    return rebuild(graph, atoms)


def translate(graph: MolGraph, t: np.ndarray) -> MolGraph:
    return rebuild(graph, [a.translated(t) for a in graph.atoms()])


def permute(graph: MolGraph, perm: np.ndarray) -> MolGraph:
    atoms = graph.atoms()
    return rebuild(graph, [atoms[k] for k in perm])


def reflection(seed: int) -> Orthogonal3:
    """A random improper orthogonal matrix (det -1)."""
    R = random_orthogonal(seed)
    if R.is_reflection:
        return R
    return Orthogonal3(R.m @ np.diag([-1.0, 1.0, 1.0]))


def _evaluate(model: GvpGnnModel, graph: MolGraph) -> tuple[np.ndarray, list[SvTuple]]:
    if model.config.task_mode == TaskMode.PAIRED:
        out = forward_pair(model, graph, graph)
    else:
        out = forward(model, graph)
    return out, node_states(model, graph)


def _state_deviation(actual: list[SvTuple], expected: list[SvTuple]) -> float:
    worst = 0.0
    for a, b in zip(actual, expected):
        worst = max(worst, relative_deviation(a.s, b.s), relative_deviation(a.V, b.V))
    return worst


def _trial(
    kind: TransformKind,
    seed: int,
    model: GvpGnnModel,
    graph: MolGraph,
    base_out: np.ndarray,
    base_states: list[SvTuple],
) -> tuple[float, float]:
    rng = np.random.default_rng([seed, list(TransformKind).index(kind)])
    expected_states = base_states
    if kind == TransformKind.ROTATION or kind == TransformKind.REFLECTION:
        R = random_orthogonal(seed, allow_reflection=False) if kind == TransformKind.ROTATION else reflection(seed)
        moved = transform_positions(graph, R)
        expected_states = [st.rotate(R) for st in base_states]
    elif kind == TransformKind.TRANSLATION:
        moved = translate(graph, rng.uniform(-MAX_TRANSLATION, MAX_TRANSLATION, size=3))
    else:
        perm = rng.permutation(graph.num_nodes)
        moved = permute(graph, perm)
        expected_states = [SvTuple(st.s[perm], st.V[perm]) for st in base_states]
    out, states = _evaluate(model, moved)
    return relative_deviation(out, base_out), _state_deviation(states, expected_states)


def check_equivariance(
    model: GvpGnnModel,
    graph: MolGraph,
    trials: int = DEFAULT_TRIALS,
    tol: float = DEFAULT_TOL,
    seed: int = 0,
) -> EquivarianceReport:
    """Audit ``model`` on ``graph``; trial ``k`` of every class uses seed ``seed + k``."""
    base_out, base_states = _evaluate(model, graph)
    results = []
    for kind in TransformKind:
        output_dev = 0.0
        state_dev = 0.0
        worst_seed = seed
        worst = -1.0
        for k in range(trials):
            trial_seed = seed + k
            out_d, state_d = _trial(kind, trial_seed, model, graph, base_out, base_states)
            logger.debug(f"{kind.value} seed {trial_seed}: output {out_d:.3e} states {state_d:.3e}")
            output_dev = max(output_dev, out_d)
            state_dev = max(state_dev, state_d)
            if max(out_d, state_d) > worst:
                worst = max(out_d, state_d)
                worst_seed = trial_seed
        results.append(TransformResult(kind, output_dev, state_dev, worst_seed))
    report = EquivarianceReport(tuple(results), tol, trials)
    logger.info(f"Equivariance audit: max deviation {report.worst.deviation:.3e} over {trials} trials")
    return report
