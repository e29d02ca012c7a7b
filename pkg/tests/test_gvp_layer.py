"""Tests for the gvp_layer module."""

import math

import numpy as np
import pytest

from gvp_gnn import autodiff as ad
from gvp_gnn.autodiff import Tape, backward
from gvp_gnn.enums import Activation, GvpVariant
from gvp_gnn.exceptions import ContractViolation
from gvp_gnn.gvp_layer import (
    GvpConfig,
    GvpParams,
    SvVar,
    glorot_bound,
    gvp_apply,
    gvp_forward,
    gvp_forward_original,
    init_params,
)
from gvp_gnn.svt_core import SvTuple, random_orthogonal


def _ones_params(cfg: GvpConfig) -> GvpParams:
    return GvpParams.from_dict(
        {name: np.ones(shape) if len(shape) == 2 else np.zeros(shape) for name, shape in cfg.param_shapes().items()}
    )


def _random_input(rng: np.random.Generator, n: int, nu: int, batch: int = 6) -> SvTuple:
    return SvTuple(rng.standard_normal((batch, n)), rng.standard_normal((batch, nu, 3)))


def _random_params(cfg: GvpConfig, seed: int) -> GvpParams:
    """Glorot weights plus non-zero biases."""
    params = init_params(cfg, seed).to_dict()
    rng = np.random.default_rng(seed + 1000)
    for name, value in params.items():
        if value.ndim == 1:
            params[name] = rng.uniform(-0.5, 0.5, size=value.shape)
    return GvpParams.from_dict(params)


class TestGvpConfig:
    """Tests for GVP configuration validation."""

    def test_hidden_defaults_to_max(self):
        assert GvpConfig(n=2, nu=3, m=4, mu=5).hidden == 5
        assert GvpConfig(n=2, nu=7, m=4, mu=5).hidden == 7

    def test_no_vectors_has_no_hidden(self):
        cfg = GvpConfig(n=3, nu=0, m=2, mu=0)
        assert cfg.hidden == 0
        assert set(cfg.param_shapes()) == {"W_m", "b_m"}

    def test_vectors_from_nothing_rejected(self):
        """Vector outputs need vector inputs."""
        with pytest.raises(ContractViolation):
            GvpConfig(n=3, nu=0, m=2, mu=1)

    def test_negative_count_rejected(self):
        with pytest.raises(ContractViolation):
            GvpConfig(n=-1, nu=1, m=1, mu=1)

    def test_original_variant_uses_sigmoid_norms(self):
        cfg = GvpConfig(n=1, nu=1, m=1, mu=1, variant=GvpVariant.ORIGINAL)
        assert cfg.vector_act == Activation.SIGMOID
        assert "W_g" not in cfg.param_shapes()
        with pytest.raises(ContractViolation):
            GvpConfig(n=1, nu=1, m=1, mu=1, variant=GvpVariant.ORIGINAL, vector_act=Activation.IDENTITY)

    def test_param_shapes(self):
        shapes = GvpConfig(n=4, nu=2, m=5, mu=3).param_shapes()
        assert shapes == {
            "W_h": (3, 2),
            "W_mu": (3, 3),
            "W_m": (5, 7),
            "b_m": (5,),
            "W_g": (3, 5),
            "b_g": (3,),
        }


class TestGvpForward:
    """Tests for the gated GVP."""

    def test_hand_evaluation(self):
        """A single unit vector through unit weights gives sigmoid(1) in x."""
        cfg = GvpConfig(n=0, nu=1, m=1, mu=1, h=1)
        out = gvp_forward(SvTuple(np.zeros(0), np.array([[1.0, 0.0, 0.0]])), _ones_params(cfg), cfg)
        np.testing.assert_array_equal(out.s, [1.0])
        np.testing.assert_allclose(out.V, [[1.0 / (1.0 + math.exp(-1.0)), 0.0, 0.0]], atol=1e-15)
        assert out.V[0, 0] == pytest.approx(0.73106, abs=1e-5)

    def test_zero_weights(self):
        """Zero weights annihilate both outputs."""
        cfg = GvpConfig(n=3, nu=2, m=4, mu=2)
        zeros = GvpParams.from_dict({name: np.zeros(shape) for name, shape in cfg.param_shapes().items()})
        x = _random_input(np.random.default_rng(0), 3, 2)
        out = gvp_forward(x, zeros, cfg)
        np.testing.assert_array_equal(out.s, np.zeros((6, 4)))
        np.testing.assert_array_equal(out.V, np.zeros((6, 2, 3)))

    def test_output_dims(self):
        cfg = GvpConfig(n=3, nu=2, m=4, mu=5)
        out = gvp_forward(_random_input(np.random.default_rng(1), 3, 2), init_params(cfg, 0), cfg)
        assert out.s.shape == (6, 4)
        assert out.V.shape == (6, 5, 3)

    def test_scalar_only_output(self):
        """mu = 0 emits an empty vector block."""
        cfg = GvpConfig(n=3, nu=2, m=4, mu=0)
        out = gvp_forward(_random_input(np.random.default_rng(1), 3, 2), init_params(cfg, 0), cfg)
        assert out.V.shape == (6, 0, 3)

    def test_dimension_mismatch(self):
        cfg = GvpConfig(n=3, nu=2, m=4, mu=2)
        with pytest.raises(ContractViolation):
            gvp_forward(_random_input(np.random.default_rng(2), 2, 2), init_params(cfg, 0), cfg)

    def test_wrong_param_shapes(self):
        cfg = GvpConfig(n=3, nu=2, m=4, mu=2)
        other = init_params(GvpConfig(n=3, nu=2, m=5, mu=2), 0)
        with pytest.raises(ContractViolation):
            gvp_forward(_random_input(np.random.default_rng(2), 3, 2), other, cfg)

    def test_recorded_op_sequence(self):
        """Recording one GVP yields one node per line of the update."""
        cfg = GvpConfig(n=3, nu=2, m=4, mu=2)
        tape = Tape()
        weights = tape.params(init_params(cfg, 0).to_dict())
        x = _random_input(np.random.default_rng(3), 3, 2)
        gvp_apply(SvVar(tape.constant(x.s), tape.constant(x.V)), weights, cfg)
        ops = [node.op for node in tape.nodes if node.op not in ("param", "const")]
        assert ops == [
            "lin_vec",
            "lin_vec",
            "row_norms",
            "concat",
            "linear",
            "relu",
            "identity",
            "linear",
            "sigmoid",
            "gate_rows",
        ]

    @pytest.mark.parametrize("variant", [GvpVariant.GATED, GvpVariant.ORIGINAL])
    def test_equivariance(self, variant):
        """Scalars are invariant and vectors rotate with the input over 100 transforms."""
        cfg = GvpConfig(n=4, nu=3, m=5, mu=2, variant=variant)
        params = _random_params(cfg, 7)
        x = _random_input(np.random.default_rng(4), 4, 3)
        base = gvp_forward(x, params, cfg)
        for seed in range(100):
            R = random_orthogonal(seed)
            out = gvp_forward(x.rotate(R), params, cfg)
            np.testing.assert_allclose(out.s, base.s, rtol=0, atol=1e-10)
            np.testing.assert_allclose(out.V, base.rotate(R).V, rtol=0, atol=1e-10)

    def test_stack_equivariance(self):
        """Three chained GVPs remain equivariant."""
        configs = [GvpConfig(n=2, nu=3, m=6, mu=4), GvpConfig(n=6, nu=4, m=6, mu=4), GvpConfig(n=6, nu=4, m=3, mu=2)]
        params = [_random_params(cfg, k) for k, cfg in enumerate(configs)]

        def run(x):
            for cfg, p in zip(configs, params):
                x = gvp_forward(x, p, cfg)
            return x

        x = _random_input(np.random.default_rng(5), 2, 3)
        base = run(x)
        for seed in range(20):
            R = random_orthogonal(100 + seed)
            out = run(x.rotate(R))
            np.testing.assert_allclose(out.s, base.s, rtol=0, atol=1e-10)
            np.testing.assert_allclose(out.V, base.rotate(R).V, rtol=0, atol=1e-10)


class TestOriginalVariant:
    """Tests for the ungated GVP."""

    def test_hand_evaluation(self):
        """A 3-4-5 row is scaled by sigmoid of its norm."""
        cfg = GvpConfig(n=0, nu=1, m=1, mu=1, variant=GvpVariant.ORIGINAL)
        V = np.array([[3.0, 4.0, 0.0]])
        out = gvp_forward(SvTuple(np.zeros(0), V), _ones_params(cfg), cfg)
        expected = (1.0 / (1.0 + math.exp(-5.0))) * V
        np.testing.assert_allclose(out.V, expected, rtol=0, atol=1e-14)

    def test_vectors_ignore_scalars(self):
        """Identical V with different s gives identical V' exactly."""
        cfg = GvpConfig(n=3, nu=2, m=4, mu=2)
        params = _random_params(cfg, 3)
        rng = np.random.default_rng(6)
        V = rng.standard_normal((5, 2, 3))
        a = gvp_forward_original(SvTuple(rng.standard_normal((5, 3)), V), params, cfg)
        b = gvp_forward_original(SvTuple(rng.standard_normal((5, 3)), V), params, cfg)
        np.testing.assert_array_equal(a.V, b.V)
        assert not np.array_equal(a.s, b.s)

    def test_gated_vectors_see_scalars(self):
        cfg = GvpConfig(n=3, nu=2, m=4, mu=2)
        params = _random_params(cfg, 3)
        rng = np.random.default_rng(6)
        V = rng.standard_normal((5, 2, 3))
        a = gvp_forward(SvTuple(rng.standard_normal((5, 3)), V), params, cfg)
        b = gvp_forward(SvTuple(rng.standard_normal((5, 3)), V), params, cfg)
        assert not np.array_equal(a.V, b.V)


class TestScalarToVectorGradient:
    """Tests for the dependence of vector outputs on scalar inputs."""

    @staticmethod
    def _vector_grad_wrt_scalars(variant: GvpVariant) -> np.ndarray:
        cfg = GvpConfig(n=3, nu=2, m=4, mu=2, variant=variant)
        params = _random_params(cfg, 11)
        rng = np.random.default_rng(8)
        tape = Tape()
        weights = tape.params(params.to_dict())
        s = tape.param("s", rng.standard_normal((5, 3)))
        V = tape.constant(rng.standard_normal((5, 2, 3)))
        out = gvp_apply(SvVar(s, V), weights, cfg)
        probe = tape.constant(rng.standard_normal((5, 2, 3)))
        return backward(tape, ad.reduce_sum(ad.mul(out.V, probe)))["s"]

    def test_original_is_exactly_zero(self):
        np.testing.assert_array_equal(self._vector_grad_wrt_scalars(GvpVariant.ORIGINAL), np.zeros((5, 3)))

    def test_gated_is_nonzero(self):
        assert np.any(self._vector_grad_wrt_scalars(GvpVariant.GATED) != 0.0)


class TestInitParams:
    """Tests for parameter initialization."""

    def test_deterministic(self):
        cfg = GvpConfig(n=4, nu=3, m=5, mu=2)
        a = init_params(cfg, 9).to_dict()
        b = init_params(cfg, 9).to_dict()
        assert list(a) == list(b)
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_seeds_differ(self):
        cfg = GvpConfig(n=4, nu=3, m=5, mu=2)
        assert not np.array_equal(init_params(cfg, 1).W_m, init_params(cfg, 2).W_m)

    def test_bound(self):
        """A 100x116 matrix lies within +-sqrt(6/216)."""
        cfg = GvpConfig(n=100, nu=16, m=100, mu=16)
        W_m = init_params(cfg, 0).W_m
        assert W_m.shape == (100, 116)
        assert np.max(np.abs(W_m)) <= math.sqrt(6.0 / 216.0)
        assert glorot_bound(100, 116) == math.sqrt(6.0 / 216.0)

    def test_biases_zero(self):
        params = init_params(GvpConfig(n=4, nu=3, m=5, mu=2), 0)
        np.testing.assert_array_equal(params.b_m, np.zeros(5))
        np.testing.assert_array_equal(params.b_g, np.zeros(2))

    def test_mean_is_centered(self):
        """The sample mean over many draws sits well inside the uniform moment bound."""
        cfg = GvpConfig(n=100, nu=0, m=100, mu=0)
        bound = glorot_bound(100, 100)
        draws = np.concatenate([init_params(cfg, seed).W_m.ravel() for seed in range(20)])
        assert abs(draws.mean()) < 3.0 * bound / math.sqrt(12.0 * 10**4)
