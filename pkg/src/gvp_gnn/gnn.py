"""
GVP-GNN.

Pipeline per structure: one-hot embedding -> ``num_layers`` message-passing
layers -> readout GVP (drops vector channels) -> mean pool or tagged-node
readout -> two dense layers. Paired tasks run both structures through the same
parameters and concatenate the two embeddings before the dense head.

Parameters live in one flat, ordered dict keyed by stable names
(``embed.W``, ``layer.0.msg.0.W_h``, ``layer.0.norm.1.scale_v``, ``readout.W_m``,
``head.1.b``, ...), which is also the checkpoint layout.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .enums import Activation, TaskMode
from .exceptions import ContractViolation, GraphError
from .gvp_layer import GvpConfig, SvVar, gvp_apply, init_tensor, scope_weights
from .models import ModelConfig
from .mol_graph import MolGraph
from .svt_core import SvTuple

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-8


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Several graphs concatenated into one disconnected graph."""

    node_scalars: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_s: np.ndarray
    """(E, rbf count)"""

    edge_V: np.ndarray
    """(E, 1, 3)"""

    node_graph: np.ndarray
    """(N,) index of the graph owning each node"""

    readout: np.ndarray
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return int(self.node_scalars.shape[0])

    @classmethod
    def collate(cls, graphs: Sequence[MolGraph]) -> GraphBatch:
        if not graphs:
            raise ContractViolation("cannot batch zero graphs")
        widths = {g.node_scalars.shape[1] for g in graphs}
        rbf_widths = {g.rbf.shape[1] for g in graphs}
        if len(widths) != 1 or len(rbf_widths) != 1:
            raise ContractViolation("graphs in a batch must share vocabulary and RBF widths")
        offsets = np.cumsum([0] + [g.num_nodes for g in graphs])[:-1]
        return cls(
            node_scalars=np.concatenate([g.node_scalars for g in graphs]),
            src=np.concatenate([g.src + off for g, off in zip(graphs, offsets)]).astype(np.intp),
            dst=np.concatenate([g.dst + off for g, off in zip(graphs, offsets)]).astype(np.intp),
            edge_s=np.concatenate([g.rbf for g in graphs]),
            edge_V=np.concatenate([g.unit_vectors for g in graphs])[:, None, :],
            node_graph=np.concatenate(
                [np.full(g.num_nodes, i, dtype=np.intp) for i, g in enumerate(graphs)]
            ),
            readout=np.concatenate([g.readout for g in graphs]),
            num_graphs=len(graphs),
        )


# ---------------------------------------------------------------------------
# Parameter layout
# ---------------------------------------------------------------------------


def gvp_configs(cfg: ModelConfig) -> dict[str, GvpConfig]:
    """Every GVP of the model keyed by its parameter prefix."""
    ns, nv = cfg.node_scalar, cfg.node_vector

    def make(n: int, nu: int, m: int, mu: int) -> GvpConfig:
        return GvpConfig(n=n, nu=nu, m=m, mu=mu, scalar_act=Activation.RELU, variant=cfg.variant)

    configs: dict[str, GvpConfig] = {}
    for i in range(cfg.num_layers):
        for k in range(cfg.msg_gvps):
            if k == 0:
                configs[f"layer.{i}.msg.{k}"] = make(ns + cfg.edge_scalar, nv + cfg.edge_vector, ns, nv)
            else:
                configs[f"layer.{i}.msg.{k}"] = make(ns, nv, ns, nv)
        dims = [(ns, nv)] + [(cfg.ff_scalar, cfg.ff_vector)] * (cfg.ff_gvps - 1) + [(ns, nv)]
        for k in range(cfg.ff_gvps):
            (n, nu), (m, mu) = dims[k], dims[k + 1]
            configs[f"layer.{i}.ff.{k}"] = make(n, nu, m, mu)
    configs["readout"] = make(ns, nv, ns, 0)
    return configs


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical, ordered name -> shape map of every model tensor."""
    gvps = gvp_configs(cfg)
    shapes: dict[str, tuple[int, ...]] = {
        "embed.W": (cfg.node_scalar, cfg.in_scalar),
        "embed.b": (cfg.node_scalar,),
    }
    for i in range(cfg.num_layers):
        for part, count in (("msg", cfg.msg_gvps), ("ff", cfg.ff_gvps)):
            for k in range(count):
                prefix = f"layer.{i}.{part}.{k}"
                for name, shape in gvps[prefix].param_shapes().items():
                    shapes[f"{prefix}.{name}"] = shape
        for j in range(2):
            shapes[f"layer.{i}.norm.{j}.scale_s"] = (cfg.node_scalar,)
            shapes[f"layer.{i}.norm.{j}.offset_s"] = (cfg.node_scalar,)
            shapes[f"layer.{i}.norm.{j}.scale_v"] = (1,)
    for name, shape in gvps["readout"].param_shapes().items():
        shapes[f"readout.{name}"] = shape
    shapes["head.0.W"] = (cfg.head_hidden, cfg.head_input)
    shapes["head.0.b"] = (cfg.head_hidden,)
    shapes["head.1.W"] = (cfg.output_dim, cfg.head_hidden)
    shapes["head.1.b"] = (cfg.output_dim,)
    return shapes


def init_model_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Fresh parameters: uniform matrices, zero biases/offsets, unit norm scales."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith((".scale_s", ".scale_v")):
            params[name] = np.ones(shape)
        else:
            params[name] = init_tensor(rng, shape)
    return params


class GvpGnnModel:
    """A model configuration together with its parameter tensors."""

    def __init__(self, config: ModelConfig, params: Mapping[str, np.ndarray] | None = None) -> None:
        self.config = config
        shapes = parameter_shapes(config)
        if params is None:
            params = init_model_params(config)
        missing = [name for name in shapes if name not in params]
        if missing:
            raise ContractViolation(f"missing model tensor {missing[0]}")
        extra = [name for name in params if name not in shapes]
        if extra:
            raise ContractViolation(f"unexpected model tensor {extra[0]}")
        self.params: dict[str, np.ndarray] = {}
        for name, shape in shapes.items():
            value = np.asarray(params[name], dtype=np.float64)
            if value.shape != shape:
                raise ContractViolation(f"{name} has shape {value.shape}, expected {shape}")
            self.params[name] = value

    def copy(self) -> GvpGnnModel:
        return GvpGnnModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def bind(self, tape: Tape) -> dict[str, Var]:
        return tape.params(self.params)

    @property
    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def __repr__(self) -> str:
        return (
            f"GvpGnnModel(layers={self.config.num_layers}, "
            f"node_dims=({self.config.node_scalar}, {self.config.node_vector}), "
            f"task_mode={self.config.task_mode.value}, parameters={self.num_parameters})"
        )


# ---------------------------------------------------------------------------
# Recorded building blocks
# ---------------------------------------------------------------------------


def _add_sv(a: SvVar, b: SvVar) -> SvVar:
    return SvVar(ad.add(a.s, b.s), ad.add(a.V, b.V))


def record_dropout(
    x: SvVar, rate: float, train_mode: bool, rng: np.random.Generator | None
) -> SvVar:
    """Entrywise scalar dropout, whole-row vector dropout; identity in eval mode."""
    if not (0.0 <= rate < 1.0):
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    if not train_mode or rate == 0.0:
        return x
    if rng is None:
        raise ContractViolation("dropout in train mode needs a random generator")
    tape = x.s.tape
    keep = 1.0 - rate
    s_mask = (rng.random(x.s.shape) < keep) / keep
    v_mask = ((rng.random(x.V.shape[:-1]) < keep) / keep)[..., None]
    return SvVar(ad.mul(x.s, tape.constant(s_mask)), ad.mul(x.V, tape.constant(v_mask)))


def record_layer_norm(x: SvVar, weights: Mapping[str, Var]) -> SvVar:
    """Standardize scalars as (s - mean) / (std + eps); rescale vectors by their RMS row norm.

    Vector channels get a scale only, never an offset.
    """
    tape = x.s.tape
    eps = tape.constant(LAYER_NORM_EPS)
    centered = ad.sub(x.s, ad.mean(x.s, axis=-1, keepdims=True))
    z = ad.div(centered, ad.add(ad.std(x.s), eps))
    s = ad.add(ad.mul(z, weights["scale_s"]), weights["offset_s"])
    if x.V.shape[-2] == 0:
        return SvVar(s, x.V)
    sq = ad.reduce_sum(ad.mul(x.V, x.V), axis=-1, keepdims=True)
    rms = ad.sqrt(ad.add(ad.mean(sq, axis=-2, keepdims=True), eps))
    return SvVar(s, ad.mul(ad.div(x.V, rms), weights["scale_v"]))


def record_embed(tape: Tape, weights: Mapping[str, Var], batch: GraphBatch, cfg: ModelConfig) -> SvVar:
    width = batch.node_scalars.shape[1]
    if width != weights["embed.W"].shape[1]:
        raise ContractViolation(
            f"node features have width {width}, embed.W expects {weights['embed.W'].shape[1]}"
        )
    s = ad.linear(tape.constant(batch.node_scalars), weights["embed.W"], weights["embed.b"])
    V = tape.constant(np.zeros((batch.num_nodes, cfg.node_vector, 3)))
    return SvVar(s, V)


def record_mp_layer(
    h: SvVar,
    batch: GraphBatch,
    weights: Mapping[str, Var],
    layer: int,
    cfg: ModelConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> SvVar:
    """One message-passing layer: messages, mean aggregation, residual norm, feed-forward."""
    tape = h.s.tape
    if batch.edge_s.shape[1] != cfg.edge_scalar:
        raise ContractViolation(
            f"edge features have width {batch.edge_s.shape[1]}, model expects {cfg.edge_scalar}"
        )
    gvps = gvp_configs(cfg)
    scoped = scope_weights(weights, f"layer.{layer}")

    msg = SvVar(
        ad.concat([ad.gather(h.s, batch.src), tape.constant(batch.edge_s)], axis=-1),
        ad.concat([ad.gather(h.V, batch.src), tape.constant(batch.edge_V)], axis=-2),
    )
    for k in range(cfg.msg_gvps):
        msg = gvp_apply(msg, scope_weights(scoped, f"msg.{k}"), gvps[f"layer.{layer}.msg.{k}"])
    agg = SvVar(
        ad.segment_mean(msg.s, batch.dst, batch.num_nodes),
        ad.segment_mean(msg.V, batch.dst, batch.num_nodes),
    )
    agg = record_dropout(agg, cfg.dropout_rate, train_mode, rng)
    h = record_layer_norm(_add_sv(h, agg), scope_weights(scoped, "norm.0"))

    ff = h
    for k in range(cfg.ff_gvps):
        ff = gvp_apply(ff, scope_weights(scoped, f"ff.{k}"), gvps[f"layer.{layer}.ff.{k}"])
    ff = record_dropout(ff, cfg.dropout_rate, train_mode, rng)
    return record_layer_norm(_add_sv(h, ff), scope_weights(scoped, "norm.1"))


def record_trunk(
    tape: Tape,
    weights: Mapping[str, Var],
    batch: GraphBatch,
    cfg: ModelConfig,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> list[SvVar]:
    """Node states after the embedding and after every message-passing layer."""
    states = [record_embed(tape, weights, batch, cfg)]
    for layer in range(cfg.num_layers):
        states.append(record_mp_layer(states[-1], batch, weights, layer, cfg, train_mode, rng))
    return states


def _graph_embeddings(s: Var, batch: GraphBatch, mode: TaskMode) -> Var:
    if mode == TaskMode.NODE_READOUT:
        tagged = np.flatnonzero(batch.readout)
        owners = batch.node_graph[tagged]
        counts = np.bincount(owners, minlength=batch.num_graphs)
        if np.any(counts == 0):
            missing = int(np.flatnonzero(counts == 0)[0])
            raise GraphError(f"graph {missing} has no readout-tagged atoms")
        return ad.segment_mean(ad.gather(s, tagged), owners, batch.num_graphs)
    return ad.segment_mean(s, batch.node_graph, batch.num_graphs)


def record_forward(
    tape: Tape,
    weights: Mapping[str, Var],
    cfg: ModelConfig,
    groups: Sequence[Sequence[MolGraph]],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> Var:
    """Outputs (B, output_dim) for B samples; each group holds one graph (two when paired)."""
    paired = cfg.task_mode == TaskMode.PAIRED
    for group in groups:
        if len(group) != cfg.graphs_per_sample:
            raise ContractViolation(
                f"{cfg.task_mode.value} mode takes {cfg.graphs_per_sample} graph(s) per sample"
            )
    if paired:
        graphs = [g[0] for g in groups] + [g[1] for g in groups]
        mode = cfg.pair_embedding
    else:
        graphs = [g[0] for g in groups]
        mode = cfg.task_mode
    batch = GraphBatch.collate(graphs)

    h = record_trunk(tape, weights, batch, cfg, train_mode, rng)[-1]
    s = gvp_apply(h, scope_weights(weights, "readout"), gvp_configs(cfg)["readout"]).s
    emb = _graph_embeddings(s, batch, mode)
    if paired:
        count = len(groups)
        emb = ad.concat(
            [ad.gather(emb, np.arange(count)), ad.gather(emb, np.arange(count, 2 * count))],
            axis=-1,
        )
    hidden = ad.relu(ad.linear(emb, weights["head.0.W"], weights["head.0.b"]))
    return ad.linear(hidden, weights["head.1.W"], weights["head.1.b"])


# ---------------------------------------------------------------------------
# Plain-array entry points
# ---------------------------------------------------------------------------


def _to_tuple(x: SvVar) -> SvTuple:
    return SvTuple(x.s.value, x.V.value)


def embed_inputs(graph: MolGraph, model: GvpGnnModel) -> SvTuple:
    """Initial node states: embedded one-hots and zero vector channels."""
    tape = Tape()
    return _to_tuple(record_embed(tape, model.bind(tape), GraphBatch.collate([graph]), model.config))


def mp_layer(
    states: SvTuple,
    graph: MolGraph,
    model: GvpGnnModel,
    layer: int,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> SvTuple:
    """Apply message-passing layer ``layer`` of ``model`` to ``states``."""
    tape = Tape()
    h = SvVar(tape.constant(states.s), tape.constant(states.V))
    batch = GraphBatch.collate([graph])
    out = record_mp_layer(h, batch, model.bind(tape), layer, model.config, train_mode, rng)
    return _to_tuple(out)


def layer_norm_sv(
    x: SvTuple,
    scale_s: np.ndarray | float = 1.0,
    offset_s: np.ndarray | float = 0.0,
    scale_v: float = 1.0,
) -> SvTuple:
    tape = Tape()
    n = x.s.shape[-1]
    weights = {
        "scale_s": tape.constant(np.broadcast_to(scale_s, (n,))),
        "offset_s": tape.constant(np.broadcast_to(offset_s, (n,))),
        "scale_v": tape.constant(np.array([scale_v])),
    }
    h = SvVar(tape.constant(x.s), tape.constant(x.V))
    return _to_tuple(record_layer_norm(h, weights))


def dropout_sv(
    x: SvTuple, rate: float, train_mode: bool, rng: np.random.Generator | None = None
) -> SvTuple:
    tape = Tape()
    h = SvVar(tape.constant(x.s), tape.constant(x.V))
    return _to_tuple(record_dropout(h, rate, train_mode, rng))


def node_states(model: GvpGnnModel, graph: MolGraph) -> list[SvTuple]:
    """Eval-mode node states after the embedding and after each layer."""
    tape = Tape()
    batch = GraphBatch.collate([graph])
    return [_to_tuple(h) for h in record_trunk(tape, model.bind(tape), batch, model.config)]


def predict(
    model: GvpGnnModel,
    groups: Sequence[Sequence[MolGraph]],
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Outputs (B, output_dim) for a batch of samples."""
    tape = Tape()
    return record_forward(tape, model.bind(tape), model.config, groups, train_mode, rng).value


def forward(
    model: GvpGnnModel,
    graph: MolGraph,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Output vector (output_dim,) of a single structure."""
    if model.config.task_mode == TaskMode.PAIRED:
        raise ContractViolation("paired models take two graphs; use forward_pair")
    return predict(model, [(graph,)], train_mode, rng)[0]


def forward_pair(
    model: GvpGnnModel,
    g1: MolGraph,
    g2: MolGraph,
    train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Output vector of a paired sample; both passes share parameters."""
    if model.config.task_mode != TaskMode.PAIRED:
        raise ContractViolation("forward_pair needs a model in paired mode")
    return predict(model, [(g1, g2)], train_mode, rng)[0]
