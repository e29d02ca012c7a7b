"""
Reverse-mode differentiation over a closed primitive set.

A Tape records every primitive application in evaluation order. Leaves are
either named parameters (which receive gradients) or constants. ``backward``
walks the tape in reverse and accumulates vector-Jacobian products into a
Grad keyed by parameter name.

Only the registered primitives can be recorded; there is no operator
overloading on Var.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .exceptions import ContractViolation
from .svt_core import gate_rows as _gate_rows
from .svt_core import lin_map_scalars, lin_map_vectors
from .svt_core import row_norms as _row_norms

logger = logging.getLogger(__name__)

_PARAM = "param"
_CONST = "const"

ForwardFn = Callable[..., np.ndarray]
VjpFn = Callable[..., Sequence[np.ndarray | None]]


@dataclass(frozen=True)
class Primitive:
    """A recordable operation: forward evaluation plus its vector-Jacobian product.

    ``vjp(g, out, *inputs, **attrs)`` returns one cotangent per input.
    """

    name: str
    forward: ForwardFn
    vjp: VjpFn


PRIMITIVES: dict[str, Primitive] = {}


def _register(name: str, forward: ForwardFn, vjp: VjpFn) -> None:
    PRIMITIVES[name] = Primitive(name, forward, vjp)


@dataclass
class TapeNode:
    """One recorded value: a leaf or a primitive application."""

    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict[str, Any] = field(default_factory=dict)
    name: str | None = None


class Var:
    """Reference to a value recorded on a Tape."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: Tape, index: int) -> None:
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        node = self.tape.nodes[self.index]
        return f"Var(#{self.index}, op={node.op}, shape={self.shape})"


class Tape:
    """Ordered record of a computation. Single writer while recording."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._params: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def param_names(self) -> tuple[str, ...]:
        return tuple(self._params)

    def _append(self, node: TapeNode) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def param(self, name: str, value: np.ndarray) -> Var:
        """Register a named leaf that receives a gradient."""
        if name in self._params:
            raise ContractViolation(f"parameter {name} is already on the tape")
        var = self._append(TapeNode(_PARAM, (), np.asarray(value, dtype=np.float64), name=name))
        self._params[name] = var.index
        return var

    def params(self, values: Mapping[str, np.ndarray]) -> dict[str, Var]:
        """Register several named leaves at once."""
        return {name: self.param(name, value) for name, value in values.items()}

    def constant(self, value: np.ndarray | float) -> Var:
        """Register a leaf that takes no gradient."""
        return self._append(TapeNode(_CONST, (), np.asarray(value, dtype=np.float64)))

    def record(self, op: str, inputs: Sequence[Var], **attrs: Any) -> Var:
        """Evaluate a registered primitive on ``inputs`` and append the result."""
        primitive = PRIMITIVES.get(op)
        if primitive is None:
            raise ContractViolation(f"unregistered primitive: {op}")
        indices = []
        for var in inputs:
            if not isinstance(var, Var) or var.tape is not self:
                raise ContractViolation(f"{op}: inputs must be Vars recorded on this tape")
            indices.append(var.index)
        value = primitive.forward(*(var.value for var in inputs), **attrs)
        return self._append(TapeNode(op, tuple(indices), np.asarray(value), dict(attrs)))

    def replay(self) -> list[np.ndarray]:
        """Re-evaluate every recorded primitive from the leaves, in tape order."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in (_PARAM, _CONST):
                values.append(node.value)
                continue
            primitive = PRIMITIVES[node.op]
            inputs = [values[i] for i in node.inputs]
            values.append(np.asarray(primitive.forward(*inputs, **node.attrs)))
        return values

    def kink_signature(self) -> bytes:
        """Sign pattern of every ReLU input on the tape.

        Two evaluations with the same signature lie on the same linear piece of
        every ReLU.
        """
        parts = [
            np.packbits(self.nodes[node.inputs[0]].value > 0).tobytes()
            for node in self.nodes
            if node.op == "relu"
        ]
        return b"|".join(parts)


class Grad(Mapping[str, np.ndarray]):
    """Per-parameter gradient accumulators, shape-congruent with the parameters."""

    def __init__(self, arrays: dict[str, np.ndarray]) -> None:
        self._arrays = arrays

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._arrays)

    def __len__(self) -> int:
        return len(self._arrays)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{v.shape}" for k, v in self._arrays.items())
        return f"Grad({shapes})"


def backward(tape: Tape, output: Var) -> Grad:
    """Reverse accumulation of d(output)/d(param) for every parameter on ``tape``."""
    if output.tape is not tape:
        raise ContractViolation("output is not recorded on this tape")
    if output.value.size != 1:
        raise ContractViolation(f"backward needs a scalar output, got shape {output.shape}")

    grads = {
        node.name: np.zeros_like(node.value)
        for node in tape.nodes
        if node.op == _PARAM and node.name is not None
    }
    adjoints: list[np.ndarray | None] = [None] * len(tape.nodes)
    adjoints[output.index] = np.ones_like(output.value)

    for index in range(output.index, -1, -1):
        g = adjoints[index]
        if g is None:
            continue
        adjoints[index] = None
        node = tape.nodes[index]
        if node.op == _PARAM:
            grads[node.name] += g
            continue
        if node.op == _CONST:
            continue
        primitive = PRIMITIVES[node.op]
        inputs = [tape.nodes[i].value for i in node.inputs]
        cotangents = primitive.vjp(g, node.value, *inputs, **node.attrs)
        for input_index, cotangent in zip(node.inputs, cotangents):
            if cotangent is None:
                continue
            previous = adjoints[input_index]
            adjoints[input_index] = cotangent if previous is None else previous + cotangent
    return Grad(grads)


# ---------------------------------------------------------------------------
# Primitive set
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    exp_x = np.exp(x[~positive])
    out[~positive] = exp_x / (1.0 + exp_x)
    return out


def _linear_vjp(g, out, x, W, b=None):
    batch = int(np.prod(g.shape[:-1]))
    g2 = g.reshape(batch, W.shape[0])
    x2 = x.reshape(batch, W.shape[1])
    grads = [g @ W, g2.T @ x2]
    if b is not None:
        grads.append(g2.sum(axis=0))
    return grads


def _lin_vec_vjp(g, out, W, V):
    """W receives the sum of g_n V_n^T over every leading batch index n."""
    g2 = g.reshape(-1, *g.shape[-2:])
    V2 = np.broadcast_to(V, g.shape[:-2] + V.shape[-2:]).reshape(-1, *V.shape[-2:])
    return np.einsum("nak,nbk->ab", g2, V2), _unbroadcast(np.matmul(W.T, g), V.shape)


def _concat_vjp(g, out, *xs, axis):
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return np.split(g, sizes, axis=axis)


def _reduce_vjp(g, x, axis, keepdims, scale):
    if axis is None:
        return (np.full(x.shape, float(g) * scale),)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape) * scale,)


def _gather_vjp(g, out, x, index):
    grad = np.zeros_like(x)
    np.add.at(grad, index, g)
    return (grad,)


def _segment_counts(index: np.ndarray, num_segments: int) -> np.ndarray:
    return np.bincount(index, minlength=num_segments).astype(np.float64)


def _segment_mean_forward(x: np.ndarray, index: np.ndarray, num_segments: int) -> np.ndarray:
    sums = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(sums, index, x)
    counts = np.maximum(_segment_counts(index, num_segments), 1.0)
    return sums / counts.reshape((-1,) + (1,) * (x.ndim - 1))


def _segment_mean_vjp(g, out, x, index, num_segments):
    counts = np.maximum(_segment_counts(index, num_segments), 1.0)
    scaled = g / counts.reshape((-1,) + (1,) * (g.ndim - 1))
    return (scaled[index],)


def _logsumexp_forward(x: np.ndarray) -> np.ndarray:
    peak = np.max(x, axis=-1, keepdims=True)
    return (peak + np.log(np.sum(np.exp(x - peak), axis=-1, keepdims=True)))[..., 0]


def _logsumexp_vjp(g, out, x):
    return (g[..., None] * np.exp(x - out[..., None]),)


def _std_vjp(g, out, x):
    """Zero where the std vanishes; the centered values are zero there too."""
    centered = x - np.mean(x, axis=-1, keepdims=True)
    safe = np.where(out > 0.0, out, 1.0)
    return (np.where(out > 0.0, g * centered / (x.shape[-1] * safe), 0.0),)

_register("add", lambda a, b: a + b, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
_register("sub", lambda a, b: a - b, lambda g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
_register(
    "mul",
    lambda a, b: a * b,
    lambda g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
)
_register(
    "div",
    lambda a, b: a / b,
    lambda g, out, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
)
_register("sqrt", np.sqrt, lambda g, out, a: (g / (2.0 * out),))
_register("relu", lambda a: np.maximum(a, 0.0), lambda g, out, a: (g * (a > 0),))
_register("sigmoid", _stable_sigmoid, lambda g, out, a: (g * out * (1.0 - out),))
_register("identity", lambda a: a.copy(), lambda g, out, a: (g,))
_register("linear", lin_map_scalars, _linear_vjp)
_register("lin_vec", lin_map_vectors, _lin_vec_vjp)
_register(
    "row_norms",
    _row_norms,
    lambda g, out, V, eps: (g[..., None] * V / out[..., None],),
)
_register("concat", lambda *xs, axis: np.concatenate(xs, axis=axis), _concat_vjp)
_register(
    "gate_rows",
    _gate_rows,
    lambda g, out, g_, V: (np.sum(g * V, axis=-1), g * g_[..., None]),
)
_register(
    "sum",
    lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
    lambda g, out, x, axis=None, keepdims=False: _reduce_vjp(g, x, axis, keepdims, 1.0),
)
_register(
    "mean",
    lambda x, axis=None, keepdims=False: np.mean(x, axis=axis, keepdims=keepdims),
    lambda g, out, x, axis=None, keepdims=False: _reduce_vjp(
        g, x, axis, keepdims, 1.0 / (x.size if axis is None else x.shape[axis])
    ),
)
_register("gather", lambda x, index: x[index], _gather_vjp)
_register("segment_mean", _segment_mean_forward, _segment_mean_vjp)
_register("logsumexp", _logsumexp_forward, _logsumexp_vjp)
_register("std", lambda x: np.std(x, axis=-1, keepdims=True), _std_vjp)


# ---------------------------------------------------------------------------
# Recording helpers, one per primitive
# ---------------------------------------------------------------------------


def add(a: Var, b: Var) -> Var:
    return a.tape.record("add", [a, b])


def sub(a: Var, b: Var) -> Var:
    return a.tape.record("sub", [a, b])


def mul(a: Var, b: Var) -> Var:
    return a.tape.record("mul", [a, b])


def div(a: Var, b: Var) -> Var:
    return a.tape.record("div", [a, b])


def sqrt(a: Var) -> Var:
    return a.tape.record("sqrt", [a])


def relu(a: Var) -> Var:
    return a.tape.record("relu", [a])


def sigmoid(a: Var) -> Var:
    return a.tape.record("sigmoid", [a])


def identity(a: Var) -> Var:
    return a.tape.record("identity", [a])


def linear(x: Var, W: Var, b: Var | None = None) -> Var:
    """Dense map of the last axis: ``x W^T (+ b)``."""
    if W.value.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ContractViolation(f"linear: input width {x.shape[-1]} vs W {W.shape}")
    inputs = [x, W] if b is None else [x, W, b]
    return x.tape.record("linear", inputs)


def lin_vec(W: Var, V: Var) -> Var:
    """Channel-wise linear map of vector rows: ``W V``."""
    if W.value.ndim != 2 or V.value.ndim < 2 or V.shape[-2] != W.shape[1]:
        raise ContractViolation(f"lin_vec: {V.shape} rows vs W {W.shape}")
    return W.tape.record("lin_vec", [W, V])


def row_norms(V: Var, eps: float = 1e-8) -> Var:
    return V.tape.record("row_norms", [V], eps=eps)


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    return xs[0].tape.record("concat", list(xs), axis=axis)


def gate_rows(g: Var, V: Var) -> Var:
    if g.shape != V.shape[:-1]:
        raise ContractViolation(f"gate_rows: gate {g.shape} vs rows {V.shape[:-1]}")
    return g.tape.record("gate_rows", [g, V])


def reduce_sum(x: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    return x.tape.record("sum", [x], axis=axis, keepdims=keepdims)


def mean(x: Var, axis: int | None = None, keepdims: bool = False) -> Var:
    return x.tape.record("mean", [x], axis=axis, keepdims=keepdims)


def gather(x: Var, index: np.ndarray) -> Var:
    """Select rows of ``x`` along the first axis."""
    return x.tape.record("gather", [x], index=np.asarray(index, dtype=np.intp))


def segment_mean(x: Var, index: np.ndarray, num_segments: int) -> Var:
    """Mean of the rows of ``x`` sharing a segment id; empty segments give zero rows."""
    return x.tape.record(
        "segment_mean", [x], index=np.asarray(index, dtype=np.intp), num_segments=num_segments
    )


def logsumexp(x: Var) -> Var:
    return x.tape.record("logsumexp", [x])


def std(x: Var) -> Var:
    """Population standard deviation over the last axis, kept as a size-1 axis."""
    return x.tape.record("std", [x])


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

LossFn = Callable[[Tape, Mapping[str, Var]], Var]


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    max_rel_error: float
    """Largest |a - b| / max(|a|, |b|, 1e-8) over the checked coordinates"""

    worst: tuple[str, int] | None
    """(parameter name, flat index) of the largest error"""

    checked: int
    """Number of coordinates compared"""

    skipped_kinks: int
    """Coordinates whose +-h perturbation crossed a ReLU kink"""

    failure: str | None = None
    """Set when f evaluated to a non-finite value"""

    @property
    def ok(self) -> bool:
        return self.failure is None


def _evaluate(f: LossFn, params: Mapping[str, np.ndarray]) -> tuple[float, bytes]:
    tape = Tape()
    out = f(tape, tape.params(params))
    return float(out.value.item()), tape.kink_signature()


def _tensor_class(name: str) -> str:
    return name.rsplit(".", 1)[-1]


def finite_diff_check(
    f: LossFn,
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
    coords_per_class: int = 100,
    seed: int = 0,
    group: Callable[[str], str] = _tensor_class,
) -> GradCheckReport:
    """Compare ``backward`` against central differences ``(f(p+h) - f(p-h)) / 2h``.

    Coordinates are sampled per tensor class (``group(name)``) with a seeded
    generator; up to ``coords_per_class`` are compared in each class.
    Perturbations that change the ReLU sign pattern are skipped and replaced.
    """
    if h <= 0:
        raise ContractViolation(f"h must be positive, got {h}")
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    tape = Tape()
    out = f(tape, tape.params(base))
    analytic = backward(tape, out)

    pools: dict[str, list[tuple[str, int]]] = {}
    for name, value in base.items():
        pools.setdefault(group(name), []).extend((name, i) for i in range(value.size))

    rng = np.random.default_rng(seed)
    max_err = 0.0
    worst: tuple[str, int] | None = None
    checked = 0
    skipped = 0
    for cls in sorted(pools):
        pool = pools[cls]
        taken = 0
        for position in rng.permutation(len(pool)):
            if taken >= coords_per_class:
                break
            name, flat = pool[position]
            original = base[name].flat[flat]
            base[name].flat[flat] = original + h
            f_plus, sig_plus = _evaluate(f, base)
            base[name].flat[flat] = original - h
            f_minus, sig_minus = _evaluate(f, base)
            base[name].flat[flat] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                return GradCheckReport(
                    float("inf"), (name, flat), checked, skipped,
                    failure=f"non-finite f at {name}[{flat}]",
                )
            if sig_plus != sig_minus:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = float(analytic[name].flat[flat])
            err = abs(numeric - exact) / max(abs(numeric), abs(exact), 1e-8)
            if worst is None or err > max_err:
                max_err = err
                worst = (name, flat)
            taken += 1
            checked += 1
    logger.debug(f"Gradient check: {checked} coordinates, {skipped} kinks, max error {max_err:.3e}")
    return GradCheckReport(max_err, worst, checked, skipped)
