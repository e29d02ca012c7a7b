"""Tests for the gnn module."""

import dataclasses

import numpy as np
import pytest

from gvp_gnn import autodiff as ad
from gvp_gnn.autodiff import finite_diff_check
from gvp_gnn.enums import TaskMode
from gvp_gnn.exceptions import ContractViolation, GraphError
from gvp_gnn.gnn import (
    GraphBatch,
    GvpGnnModel,
    dropout_sv,
    embed_inputs,
    forward,
    forward_pair,
    gvp_configs,
    layer_norm_sv,
    mp_layer,
    node_states,
    parameter_shapes,
    predict,
    record_forward,
)
from gvp_gnn.demos import random_atoms
from gvp_gnn.models import ModelConfig
from gvp_gnn.mol_graph import AtomRecord, featurize
from gvp_gnn.svt_core import SvTuple, apply_orthogonal, random_orthogonal


def _transformed(graph, R=None, t=(0.0, 0.0, 0.0), order=None):
    atoms = graph.atoms()
    if order is not None:
        atoms = [atoms[k] for k in order]
    moved = []
    for atom in atoms:
        p = np.array(atom.position)
        if R is not None:
            p = R.m @ p
        moved.append(AtomRecord(atom.element, tuple(p + np.asarray(t)), atom.readout_tag))
    return featurize(moved, graph.vocab, graph.cutoff, graph.rbf.shape[1])


def _close(actual, expected, tol):
    scale = max(1.0, float(np.max(np.abs(expected))) if np.size(expected) else 1.0)
    assert np.max(np.abs(np.asarray(actual) - np.asarray(expected)), initial=0.0) <= tol * scale


# ---------------------------------------------------------------------------
# Straight-line reference of the same equations, one node and edge at a time
# ---------------------------------------------------------------------------


def _ref_gvp(s, V, p, mu):
    sigmoid = lambda x: 1.0 / (1.0 + np.exp(-x))  # noqa: E731
    V_h = p["W_h"] @ V
    s_h = np.sqrt(np.sum(V_h * V_h, axis=1) + 1e-16)
    s_m = p["W_m"] @ np.concatenate([s_h, s]) + p["b_m"]
    s_out = np.maximum(s_m, 0.0)
    if mu == 0:
        return s_out, np.zeros((0, 3))
    V_mu = p["W_mu"] @ V_h
    gate = sigmoid(p["W_g"] @ s_m + p["b_g"])
    return s_out, gate[:, None] * V_mu


def _ref_norm(s, V, p):
    z = (s - s.mean()) / (s.std() + 1e-8)
    s_out = z * p["scale_s"] + p["offset_s"]
    rms = np.sqrt(np.mean(np.sum(V * V, axis=1)) + 1e-8)
    return s_out, V / rms * p["scale_v"][0]


def _scoped(params, prefix):
    return {k[len(prefix) + 1:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def _ref_forward(model, graph):
    cfg = model.config
    P = model.params
    gvps = gvp_configs(cfg)
    n = graph.num_nodes
    s = [P["embed.W"] @ graph.node_scalars[i] + P["embed.b"] for i in range(n)]
    V = [np.zeros((cfg.node_vector, 3)) for _ in range(n)]
    for layer in range(cfg.num_layers):
        incoming = {i: [] for i in range(n)}
        for k in range(graph.num_edges):
            j, i = int(graph.src[k]), int(graph.dst[k])
            ms = np.concatenate([s[j], graph.rbf[k]])
            mV = np.vstack([V[j], graph.unit_vectors[k][None, :]])
            for g in range(cfg.msg_gvps):
                prefix = f"layer.{layer}.msg.{g}"
                ms, mV = _ref_gvp(ms, mV, _scoped(P, prefix), gvps[prefix].mu)
            incoming[i].append((ms, mV))
        new_s, new_V = [], []
        for i in range(n):
            if incoming[i]:
                agg_s = sum(m[0] for m in incoming[i]) / len(incoming[i])
                agg_V = sum(m[1] for m in incoming[i]) / len(incoming[i])
            else:
                agg_s, agg_V = np.zeros_like(s[i]), np.zeros_like(V[i])
            hs, hV = _ref_norm(s[i] + agg_s, V[i] + agg_V, _scoped(P, f"layer.{layer}.norm.0"))
            fs, fV = hs, hV
            for g in range(cfg.ff_gvps):
                prefix = f"layer.{layer}.ff.{g}"
                fs, fV = _ref_gvp(fs, fV, _scoped(P, prefix), gvps[prefix].mu)
            hs, hV = _ref_norm(hs + fs, hV + fV, _scoped(P, f"layer.{layer}.norm.1"))
            new_s.append(hs)
            new_V.append(hV)
        s, V = new_s, new_V
    pooled = sum(_ref_gvp(s[i], V[i], _scoped(P, "readout"), 0)[0] for i in range(n)) / n
    hidden = np.maximum(P["head.0.W"] @ pooled + P["head.0.b"], 0.0)
    return P["head.1.W"] @ hidden + P["head.1.b"]


class TestParameterLayout:
    """Tests for model parameter names and shapes."""

    def test_first_message_gvp_sees_edge_channels(self, small_cfg):
        gvps = gvp_configs(small_cfg)
        first = gvps["layer.0.msg.0"]
        assert (first.n, first.nu, first.m, first.mu) == (6 + 16, 3 + 1, 6, 3)
        assert (gvps["readout"].m, gvps["readout"].mu) == (6, 0)

    def test_feed_forward_widths(self, small_cfg):
        gvps = gvp_configs(small_cfg)
        assert (gvps["layer.1.ff.0"].m, gvps["layer.1.ff.0"].mu) == (8, 4)
        assert (gvps["layer.1.ff.1"].n, gvps["layer.1.ff.1"].nu) == (8, 4)

    def test_shapes(self, small_cfg):
        shapes = parameter_shapes(small_cfg)
        assert shapes["embed.W"] == (6, 4)
        assert shapes["layer.0.norm.1.scale_v"] == (1,)
        assert shapes["head.0.W"] == (5, 6)
        assert shapes["head.1.b"] == (1,)
        assert list(shapes)[0] == "embed.W"
        assert list(shapes)[-1] == "head.1.b"

    def test_default_dimensions(self):
        """The full-size configuration uses 100 scalar and 16 vector channels."""
        cfg = ModelConfig()
        gvps = gvp_configs(cfg)
        assert (gvps["layer.4.msg.0"].n, gvps["layer.4.msg.0"].nu) == (116, 17)
        assert "layer.5.msg.0" not in gvps
        assert parameter_shapes(cfg)["readout.W_m"] == (100, 116)

    def test_paired_head_width(self, make_config):
        assert parameter_shapes(make_config(task_mode=TaskMode.PAIRED))["head.0.W"] == (5, 12)

    def test_model_rejects_bad_tensors(self, small_model, small_cfg):
        params = dict(small_model.params)
        params["embed.W"] = np.zeros((2, 2))
        with pytest.raises(ContractViolation):
            GvpGnnModel(small_cfg, params)
        del params["embed.W"]
        with pytest.raises(ContractViolation, match="missing"):
            GvpGnnModel(small_cfg, params)

    def test_init_is_deterministic(self, small_cfg):
        a, b = GvpGnnModel(small_cfg), GvpGnnModel(small_cfg)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        np.testing.assert_array_equal(a.params["layer.0.norm.0.scale_s"], np.ones(6))

    def test_copy_is_independent(self, small_model):
        clone = small_model.copy()
        clone.params["embed.b"][0] += 1.0
        assert clone.params["embed.b"][0] != small_model.params["embed.b"][0]


class TestEmbedding:
    """Tests for the input embedding."""

    def test_selects_column(self, small_cfg):
        model = GvpGnnModel(small_cfg)
        graph = featurize([AtomRecord("N", (0.0, 0.0, 0.0))], small_cfg.element_vocab)
        states = embed_inputs(graph, model)
        np.testing.assert_allclose(
            states.s[0], model.params["embed.W"][:, 1] + model.params["embed.b"], atol=1e-15
        )
        np.testing.assert_array_equal(states.V, np.zeros((1, 3, 3)))

    def test_same_element_same_state(self, small_model):
        graph = featurize(
            [AtomRecord("O", (0.0, 0.0, 0.0)), AtomRecord("O", (0.0, 0.0, 2.0))],
            small_model.config.element_vocab,
        )
        states = embed_inputs(graph, small_model)
        np.testing.assert_array_equal(states.s[0], states.s[1])

    def test_width_mismatch(self, small_model):
        graph = featurize([AtomRecord("C", (0.0, 0.0, 0.0))])
        with pytest.raises(ContractViolation, match="width"):
            embed_inputs(graph, small_model)


class TestMessagePassing:
    """Tests for message-passing layers."""

    def test_isolated_node_ignores_aggregation(self, small_model):
        """A node without in-edges evolves exactly as it would alone."""
        vocab = small_model.config.element_vocab
        alone = featurize([AtomRecord("C", (0.0, 0.0, 0.0))], vocab)
        pair = featurize([AtomRecord("C", (0.0, 0.0, 0.0)), AtomRecord("O", (0.0, 0.0, 10.0))], vocab)
        out_alone = mp_layer(embed_inputs(alone, small_model), alone, small_model, 0)
        out_pair = mp_layer(embed_inputs(pair, small_model), pair, small_model, 0)
        np.testing.assert_allclose(out_pair.s[0], out_alone.s[0], atol=1e-14)
        np.testing.assert_allclose(out_pair.V[0], out_alone.V[0], atol=1e-14)

    def test_layer_rotation_equivariance(self, small_model, graph):
        R = random_orthogonal(4)
        rotated = _transformed(graph, R)
        states = node_states(small_model, graph)
        rotated_states = node_states(small_model, rotated)
        for base, turned in zip(states, rotated_states):
            _close(turned.s, base.s, 1e-10)
            _close(turned.V, apply_orthogonal(R, base.V), 1e-10)

    def test_vector_states_are_not_trivial(self, small_model, graph):
        assert np.max(np.abs(node_states(small_model, graph)[-1].V)) > 1e-3

    def test_node_permutation(self, small_model, graph):
        order = np.random.default_rng(0).permutation(graph.num_nodes)
        base = node_states(small_model, graph)[-1]
        permuted = node_states(small_model, _transformed(graph, order=order))[-1]
        np.testing.assert_allclose(permuted.s, base.s[order], atol=1e-12)
        np.testing.assert_allclose(permuted.V, base.V[order], atol=1e-12)


class TestLayerNorm:
    """Tests for tuple layer normalization."""

    def test_constant_scalars_vanish(self):
        out = layer_norm_sv(SvTuple(np.full((2, 5), 3.0), np.zeros((2, 0, 3))))
        np.testing.assert_array_equal(out.s, np.zeros((2, 5)))

    def test_standardized_scalars(self):
        s = np.random.default_rng(0).standard_normal((3, 10))
        out = layer_norm_sv(SvTuple(s, np.zeros((3, 0, 3))))
        np.testing.assert_allclose(out.s.mean(axis=1), 0.0, atol=1e-14)
        np.testing.assert_allclose(out.s.std(axis=1), 1.0, atol=1e-7)

    def test_eps_added_to_std(self):
        """A tiny spread still standardizes to about +-1."""
        out = layer_norm_sv(SvTuple(np.array([[0.0, 1e-4]]), np.zeros((1, 0, 3))))
        expected = 5e-5 / (5e-5 + 1e-8)
        np.testing.assert_allclose(out.s, [[-expected, expected]], rtol=1e-12)
        np.testing.assert_allclose(out.s, [[-0.9998, 0.9998]], atol=1e-4)

    def test_vector_rows_rescaled(self):
        """Rows of norm 2 come out with norm about 1."""
        V = np.zeros((1, 4, 3))
        V[0, :, 0] = 2.0
        out = layer_norm_sv(SvTuple(np.zeros((1, 2)), V))
        np.testing.assert_allclose(np.linalg.norm(out.V, axis=-1), 1.0, atol=1e-8)

    def test_scale_and_offset(self):
        s = np.array([[1.0, -1.0]])
        out = layer_norm_sv(SvTuple(s, np.ones((1, 1, 3))), scale_s=2.0, offset_s=0.5, scale_v=3.0)
        np.testing.assert_allclose(out.s, [[2.5, -1.5]], atol=1e-7)
        np.testing.assert_allclose(np.linalg.norm(out.V[0, 0]), 3.0, atol=1e-7)

    def test_commutes_with_rotation(self):
        rng = np.random.default_rng(1)
        x = SvTuple(rng.standard_normal((4, 3)), rng.standard_normal((4, 5, 3)))
        R = random_orthogonal(12)
        np.testing.assert_allclose(
            layer_norm_sv(x.rotate(R)).V, apply_orthogonal(R, layer_norm_sv(x).V), atol=1e-12
        )


class TestDropout:
    """Tests for tuple dropout."""

    def _input(self):
        return SvTuple(np.ones((1000, 100)), np.ones((1000, 10, 3)))

    def test_zero_rate_is_identity(self):
        x = self._input()
        out = dropout_sv(x, 0.0, True, np.random.default_rng(0))
        np.testing.assert_array_equal(out.s, x.s)

    def test_eval_mode_is_identity(self):
        x = self._input()
        out = dropout_sv(x, 0.9, False)
        np.testing.assert_array_equal(out.s, x.s)
        np.testing.assert_array_equal(out.V, x.V)

    def test_survivor_fraction(self):
        """Half the entries survive, scaled by two; vector rows drop as a whole."""
        out = dropout_sv(self._input(), 0.5, True, np.random.default_rng(0))
        assert set(np.unique(out.s)) <= {0.0, 2.0}
        assert abs(np.mean(out.s != 0.0) - 0.5) < 0.01
        rows_zero = np.all(out.V == 0.0, axis=-1)
        rows_kept = np.all(out.V == 2.0, axis=-1)
        assert np.all(rows_zero | rows_kept)
        assert abs(np.mean(rows_kept) - 0.5) < 0.02

    def test_bad_rate(self):
        with pytest.raises(ContractViolation):
            dropout_sv(self._input(), 1.0, True, np.random.default_rng(0))

    def test_train_mode_needs_rng(self):
        with pytest.raises(ContractViolation):
            dropout_sv(self._input(), 0.5, True)


class TestForward:
    """Tests for whole-model evaluation."""

    @pytest.mark.parametrize(("seed", "count"), [(17, 4), (1, 5), (2, 7), (3, 9), (4, 12)])
    def test_matches_straight_line_reference(self, small_model, seed, count):
        """Random structures match an independent per-node evaluation."""
        rng = np.random.default_rng(seed)
        graph = featurize(random_atoms(rng, count), small_model.config.element_vocab)
        assert graph.num_edges > 0
        np.testing.assert_allclose(forward(small_model, graph), _ref_forward(small_model, graph), rtol=0, atol=1e-12)

    def test_single_atom(self, small_model):
        graph = featurize([AtomRecord("C", (1.0, 2.0, 3.0))], small_model.config.element_vocab)
        out = forward(small_model, graph)
        assert out.shape == (1,)
        assert np.all(np.isfinite(out))

    def test_rigid_motion_invariance(self, small_model, graph):
        """Rotations, reflections and translations leave the output unchanged."""
        base = forward(small_model, graph)
        rng = np.random.default_rng(5)
        for seed in range(25):
            moved = _transformed(graph, random_orthogonal(seed), rng.uniform(-10.0, 10.0, size=3))
            _close(forward(small_model, moved), base, 1e-10)

    def test_permutation_invariance(self, small_model, graph):
        order = np.random.default_rng(1).permutation(graph.num_nodes)
        np.testing.assert_allclose(
            forward(small_model, _transformed(graph, order=order)), forward(small_model, graph), atol=1e-12
        )

    def test_batch_matches_single(self, small_model, make_graph):
        graphs = [make_graph(seed) for seed in range(3)]
        batched = predict(small_model, [(g,) for g in graphs])
        for k, g in enumerate(graphs):
            np.testing.assert_allclose(batched[k], forward(small_model, g), atol=1e-12)

    def test_forward_rejects_paired_model(self, make_config, graph):
        model = GvpGnnModel(make_config(task_mode=TaskMode.PAIRED))
        with pytest.raises(ContractViolation):
            forward(model, graph)

    def test_gradient_check(self, small_model, graph):
        """Backward agrees with central differences across the whole model."""

        def f(tape, weights):
            out = record_forward(tape, weights, small_model.config, [(graph,)])
            return ad.reduce_sum(ad.mul(out, out))

        report = finite_diff_check(f, small_model.params, coords_per_class=10)
        assert report.ok
        assert report.checked > 0
        assert report.max_rel_error <= 1e-4

    @pytest.mark.slow
    def test_gradient_check_five_layers(self, make_config, make_graph):
        """A five-layer model on a 10-atom structure, 100 coordinates per tensor class."""
        model = GvpGnnModel(make_config(num_layers=5))
        rng = np.random.default_rng(21)
        for name, value in model.params.items():
            if value.ndim == 1:
                model.params[name] = value + rng.uniform(-0.5, 0.5, size=value.shape)
        graph = make_graph(7, count=10)
        assert graph.num_edges > 0

        def f(tape, weights):
            out = record_forward(tape, weights, model.config, [(graph,)])
            return ad.reduce_sum(ad.mul(out, out))

        report = finite_diff_check(f, model.params, coords_per_class=100)
        assert report.ok
        assert report.checked >= 100
        assert report.max_rel_error <= 1e-4


class TestNodeReadout:
    """Tests for tagged-node readout."""

    def test_requires_tag(self, make_config, graph):
        model = GvpGnnModel(make_config(task_mode=TaskMode.NODE_READOUT))
        with pytest.raises(GraphError, match="readout-tagged"):
            forward(model, graph)

    def test_tagged_node_readout_is_invariant(self, make_config, make_graph):
        model = GvpGnnModel(make_config(task_mode=TaskMode.NODE_READOUT))
        graph = make_graph(3, tag_first=True)
        base = forward(model, graph)
        _close(forward(model, _transformed(graph, random_orthogonal(2), (1.0, -2.0, 0.5))), base, 1e-10)
        pooled = GvpGnnModel(dataclasses.replace(model.config, task_mode=TaskMode.POOL), model.params)
        assert not np.allclose(base, forward(pooled, graph))


class TestPaired:
    """Tests for paired inputs with shared parameters."""

    @pytest.fixture
    def paired_model(self, make_config):
        model = GvpGnnModel(make_config(task_mode=TaskMode.PAIRED))
        rng = np.random.default_rng(9)
        for name, value in model.params.items():
            if value.ndim == 1:
                model.params[name] = value + rng.uniform(-0.5, 0.5, size=value.shape)
        return model

    def test_duplicate_input(self, paired_model, make_config, graph):
        """g1 = g2 behaves like a pooled model whose head folds the two halves."""
        params = dict(paired_model.params)
        W = params["head.0.W"]
        params["head.0.W"] = W[:, :6] + W[:, 6:]
        pooled = GvpGnnModel(make_config(), params)
        np.testing.assert_allclose(forward_pair(paired_model, graph, graph), forward(pooled, graph), atol=1e-12)

    def test_independent_rotations(self, paired_model, make_graph):
        g1, g2 = make_graph(1), make_graph(2)
        base = forward_pair(paired_model, g1, g2)
        moved = forward_pair(
            paired_model, _transformed(g1, random_orthogonal(3)), _transformed(g2, random_orthogonal(4), (5.0, 0.0, 0.0))
        )
        _close(moved, base, 1e-10)

    def test_order_matters(self, paired_model, make_graph):
        g1, g2 = make_graph(1), make_graph(2)
        assert not np.allclose(forward_pair(paired_model, g1, g2), forward_pair(paired_model, g2, g1))

    def test_pair_requires_paired_model(self, small_model, graph):
        with pytest.raises(ContractViolation):
            forward_pair(small_model, graph, graph)


class TestGraphBatch:
    """Tests for batching graphs."""

    def test_offsets(self, make_graph):
        a, b = make_graph(1), make_graph(2)
        batch = GraphBatch.collate([a, b])
        assert batch.num_nodes == a.num_nodes + b.num_nodes
        assert batch.num_graphs == 2
        np.testing.assert_array_equal(batch.src[a.num_edges:], b.src + a.num_nodes)
        assert batch.edge_V.shape == (a.num_edges + b.num_edges, 1, 3)
        np.testing.assert_array_equal(np.bincount(batch.node_graph), [a.num_nodes, b.num_nodes])

    def test_empty(self):
        with pytest.raises(ContractViolation):
            GraphBatch.collate([])
