"""
Geometric vector perceptron.

``gvp_apply`` records one GVP on a Tape:

    V_h = W_h V ; V_mu = W_mu V_h ; s_h = |V_h| ; s_hn = concat(s_h, s)
    s_m = W_m s_hn + b_m ; s' = sigma(s_m)
    gated:    V' = sigmoid(W_g sigma_plus(s_m) + b_g) * V_mu   (row-wise)
    original: V' = sigmoid(|V_mu|) * V_mu                      (row-wise)

``gvp_forward`` / ``gvp_forward_original`` are the plain numpy entry points.
"""

from __future__ import annotations

import dataclasses
import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .enums import Activation, GvpVariant
from .exceptions import ContractViolation
from .svt_core import SvTuple

PARAM_ORDER = ("W_h", "W_mu", "W_m", "b_m", "W_g", "b_g")


class SvVar(NamedTuple):
    """Scalar and vector channels recorded on a tape."""

    s: Var
    V: Var


@dataclass(frozen=True)
class GvpConfig:
    """Dimensions and selectors of one GVP."""

    n: int
    """Input scalar channels"""

    nu: int
    """Input vector channels"""

    m: int
    """Output scalar channels"""

    mu: int
    """Output vector channels"""

    h: int | None = None
    """Hidden vector channels; defaults to max(nu, mu), zero when nu is zero"""

    scalar_act: Activation = Activation.RELU
    """sigma, applied to s_m for the scalar output"""

    vector_act: Activation | None = None
    """sigma_plus, applied to s_m before the gate; defaults to identity (gated) or sigmoid (original)"""

    variant: GvpVariant = GvpVariant.GATED

    def __post_init__(self) -> None:
        for name in ("n", "nu", "m", "mu"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"GVP channel count {name} must be >= 0")
        if self.nu == 0 and self.mu > 0:
            raise ContractViolation("a GVP without input vectors cannot emit vector channels")
        h = self.h
        if h is None:
            h = max(self.nu, self.mu) if self.nu > 0 else 0
        if self.nu > 0 and h < 1:
            raise ContractViolation("h must be >= 1 when the GVP has input vectors")
        if self.nu == 0 and h != 0:
            raise ContractViolation("h must be 0 when the GVP has no input vectors")
        object.__setattr__(self, "h", h)

        vector_act = self.vector_act
        if vector_act is None:
            vector_act = (
                Activation.SIGMOID if self.variant == GvpVariant.ORIGINAL else Activation.IDENTITY
            )
        if vector_act not in (Activation.IDENTITY, Activation.SIGMOID):
            raise ContractViolation(f"sigma_plus must be identity or sigmoid, got {vector_act.value}")
        if self.variant == GvpVariant.ORIGINAL and vector_act != Activation.SIGMOID:
            raise ContractViolation("the original variant applies a sigmoid to the row norms")
        object.__setattr__(self, "vector_act", vector_act)

    @property
    def hidden(self) -> int:
        assert self.h is not None
        return self.h

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Shapes of the learnable tensors, in canonical order."""
        shapes: dict[str, tuple[int, ...]] = {}
        if self.nu > 0:
            shapes["W_h"] = (self.hidden, self.nu)
        if self.mu > 0:
            shapes["W_mu"] = (self.mu, self.hidden)
        shapes["W_m"] = (self.m, self.hidden + self.n)
        shapes["b_m"] = (self.m,)
        if self.mu > 0 and self.variant == GvpVariant.GATED:
            shapes["W_g"] = (self.mu, self.m)
            shapes["b_g"] = (self.mu,)
        return shapes


@dataclass(frozen=True)
class GvpParams:
    """The learnable tensors of one GVP; W_g and b_g are absent in the original variant."""

    W_m: np.ndarray
    b_m: np.ndarray
    W_h: np.ndarray | None = None
    W_mu: np.ndarray | None = None
    W_g: np.ndarray | None = None
    b_g: np.ndarray | None = None

    def to_dict(self) -> dict[str, np.ndarray]:
        return {
            name: getattr(self, name)
            for name in PARAM_ORDER
            if getattr(self, name) is not None
        }

    @classmethod
    def from_dict(cls, values: Mapping[str, np.ndarray]) -> GvpParams:
        return cls(**{name: np.asarray(values[name], dtype=np.float64) for name in values})

    def check(self, cfg: GvpConfig) -> None:
        """Raise ContractViolation unless the tensors match ``cfg``."""
        present = self.to_dict()
        shapes = cfg.param_shapes()
        if set(present) != set(shapes):
            raise ContractViolation(
                f"GVP tensors {sorted(present)} do not match config {sorted(shapes)}"
            )
        for name, shape in shapes.items():
            if present[name].shape != shape:
                raise ContractViolation(f"{name} has shape {present[name].shape}, expected {shape}")
            if not np.all(np.isfinite(present[name])):
                raise ContractViolation(f"{name} has non-finite entries")


def glorot_bound(rows: int, cols: int) -> float:
    """Half-width of the uniform initializer for a rows x cols matrix."""
    return math.sqrt(6.0 / (rows + cols)) if rows + cols > 0 else 0.0


def init_tensor(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Matrices uniform on +-sqrt(6/(a+b)); vectors (biases) zero."""
    if len(shape) == 2:
        bound = glorot_bound(*shape)
        return rng.uniform(-bound, bound, size=shape)
    return np.zeros(shape)


def init_from_rng(cfg: GvpConfig, rng: np.random.Generator) -> GvpParams:
    return GvpParams.from_dict(
        {name: init_tensor(rng, shape) for name, shape in cfg.param_shapes().items()}
    )


def init_params(cfg: GvpConfig, seed: int) -> GvpParams:
    """Deterministic initialization of one GVP."""
    return init_from_rng(cfg, np.random.default_rng(seed))


def scope_weights(weights: Mapping[str, Var], prefix: str) -> dict[str, Var]:
    """The entries below ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {name[len(p):]: var for name, var in weights.items() if name.startswith(p)}


def activate(x: Var, act: Activation) -> Var:
    if act == Activation.RELU:
        return ad.relu(x)
    if act == Activation.SIGMOID:
        return ad.sigmoid(x)
    return ad.identity(x)


def gvp_apply(x: SvVar, weights: Mapping[str, Var], cfg: GvpConfig) -> SvVar:
    """Record one GVP on the tape of ``x``."""
    tape = x.s.tape
    if x.s.shape[-1] != cfg.n or x.V.shape[-2] != cfg.nu:
        raise ContractViolation(
            f"GVP expects ({cfg.n}, {cfg.nu}) channels, got ({x.s.shape[-1]}, {x.V.shape[-2]})"
        )
    batch = x.s.shape[:-1]

    if cfg.nu > 0:
        v_h = ad.lin_vec(weights["W_h"], x.V)
        v_mu = ad.lin_vec(weights["W_mu"], v_h) if cfg.mu > 0 else None
        s_h = ad.row_norms(v_h)
        s_hn = ad.concat([s_h, x.s], axis=-1)
    else:
        v_mu = None
        s_hn = x.s

    s_m = ad.linear(s_hn, weights["W_m"], weights["b_m"])
    s_out = activate(s_m, cfg.scalar_act)

    if v_mu is None:
        return SvVar(s_out, tape.constant(np.zeros(batch + (0, 3))))

    if cfg.variant == GvpVariant.GATED:
        assert cfg.vector_act is not None
        gate_in = activate(s_m, cfg.vector_act)
        gate = ad.sigmoid(ad.linear(gate_in, weights["W_g"], weights["b_g"]))
    else:
        gate = ad.sigmoid(ad.row_norms(v_mu))
    return SvVar(s_out, ad.gate_rows(gate, v_mu))


def bind(tape: Tape, x: SvTuple) -> SvVar:
    """Place a numpy tuple on a tape as constants."""
    return SvVar(tape.constant(x.s), tape.constant(x.V))


def gvp_forward(x: SvTuple, params: GvpParams, cfg: GvpConfig) -> SvTuple:
    """Evaluate one GVP on plain arrays."""
    params.check(cfg)
    tape = Tape()
    weights = tape.params(params.to_dict())
    out = gvp_apply(bind(tape, x), weights, cfg)
    return SvTuple(out.s.value, out.V.value)


def gvp_forward_original(x: SvTuple, params: GvpParams, cfg: GvpConfig) -> SvTuple:
    """Evaluate the ungated GVP, whose vector output never sees the scalar input."""
    original = dataclasses.replace(
        cfg, variant=GvpVariant.ORIGINAL, vector_act=Activation.SIGMOID
    )
    return gvp_forward(x, dataclasses.replace(params, W_g=None, b_g=None), original)
