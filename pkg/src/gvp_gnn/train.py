"""
Losses, the Adam optimizer, the training loop and learning-curve smoothing.

Datasets are lists of Sample. A manifest file lists one sample per line::

    # graph path(s) then target value(s)
    mols/a.json 1.25
    mols/b.xyz  0.5

Paired models take two paths per line. Relative paths resolve against the
manifest's directory; ``.xyz`` files are featurized with the model's
vocabulary, cutoff and hydrogen setting.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .enums import LossKind, MetricKind
from .exceptions import ContractViolation, GvpError, NumericError, ParseError, UndefinedMetricError
from .gnn import GvpGnnModel, record_forward
from .graph_io import load_graph
from .metrics import compute_metric
from .models import History, ModelConfig, Sample, TrainConfig
from .mol_graph import MolGraph, featurize, parse_xyz, strip_hydrogens

logger = logging.getLogger(__name__)

EVAL_BATCH_SIZE = 64


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def record_mse(pred: Var, target: np.ndarray) -> Var:
    """Mean squared error over every entry."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ContractViolation(f"prediction {pred.shape} and target {target.shape} differ")
    diff = ad.sub(pred, pred.tape.constant(target))
    return ad.mean(ad.mul(diff, diff))


def _class_labels(labels: np.ndarray, num_classes: int, count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if labels.size != count:
        raise ContractViolation(f"expected {count} labels, got {labels.size}")
    if not np.all(labels == np.round(labels)) or np.any(labels < 0) or np.any(labels >= num_classes):
        raise ContractViolation(f"labels must be integers in [0, {num_classes})")
    return labels.astype(np.intp)


def record_cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """Mean of ``logsumexp(logits) - logits[label]`` over the batch."""
    if len(logits.shape) != 2:
        raise ContractViolation(f"logits must be (batch, classes), got {logits.shape}")
    count, num_classes = logits.shape
    index = _class_labels(labels, num_classes, count)
    mask = np.zeros(logits.shape)
    mask[np.arange(count), index] = 1.0
    picked = ad.reduce_sum(ad.mul(logits, logits.tape.constant(mask)), axis=-1)
    return ad.mean(ad.sub(ad.logsumexp(logits), picked))


def record_loss(outputs: Var, targets: np.ndarray, kind: LossKind) -> Var:
    if kind == LossKind.CROSS_ENTROPY:
        return record_cross_entropy(outputs, targets)
    return record_mse(outputs, targets)


def loss_mse(pred: np.ndarray, target: np.ndarray) -> float:
    tape = Tape()
    return record_mse(tape.constant(pred), target).value.item()


def loss_cross_entropy(logits: np.ndarray, label: int | np.ndarray) -> float:
    """Cross-entropy of one logit vector (or a batch of them) against integer labels."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    tape = Tape()
    return record_cross_entropy(tape.constant(logits), np.atleast_1d(label)).value.item()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with bias correction; ``step`` returns new arrays and leaves its inputs untouched."""

    def __init__(
        self,
        params: Mapping[str, np.ndarray],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}

    def step(
        self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]
    ) -> dict[str, np.ndarray]:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        updated = {}
        for name, value in params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            updated[name] = value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated

    @classmethod
    def from_config(cls, params: Mapping[str, np.ndarray], cfg: TrainConfig) -> Adam:
        return cls(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


def stack_targets(samples: Sequence[Sample]) -> np.ndarray:
    widths = {s.target.shape for s in samples}
    if len(widths) != 1:
        raise ContractViolation(f"samples carry targets of different shapes: {sorted(widths)}")
    return np.stack([s.target for s in samples])


def predict_dataset(
    model: GvpGnnModel, samples: Sequence[Sample], batch_size: int = EVAL_BATCH_SIZE
) -> np.ndarray:
    """Eval-mode outputs (len(samples), output_dim)."""
    chunks = []
    for start in range(0, len(samples), batch_size):
        tape = Tape()
        groups = [s.graphs for s in samples[start : start + batch_size]]
        chunks.append(record_forward(tape, model.bind(tape), model.config, groups).value)
    return np.concatenate(chunks)


def metric_scores(outputs: np.ndarray, loss: LossKind) -> np.ndarray:
    """Per-sample scores for the metrics.

    Regression outputs are used as they are. Two-class logits score by their
    difference (class 1 minus class 0); more classes by the predicted label.
    """
    if loss == LossKind.CROSS_ENTROPY:
        if outputs.shape[1] == 2:
            return outputs[:, 1] - outputs[:, 0]
        return np.argmax(outputs, axis=1).astype(np.float64)
    return outputs.ravel()


def evaluate(
    model: GvpGnnModel, samples: Sequence[Sample], loss: LossKind, metric: MetricKind | None = None
) -> tuple[float, float]:
    """(loss, metric) of ``model`` on ``samples`` in eval mode; metric NaN when undefined."""
    outputs = predict_dataset(model, samples)
    targets = stack_targets(samples)
    tape = Tape()
    value = record_loss(tape.constant(outputs), targets, loss).value.item()
    score = math.nan
    if metric is not None:
        try:
            score = compute_metric(metric_scores(outputs, loss), targets.ravel(), metric)
        except UndefinedMetricError as e:
            logger.warning(f"Metric {metric.value} undefined: {e}")
        except ContractViolation as e:
            logger.warning(f"Metric {metric.value} skipped: {e}")
    return value, score


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train_loop(
    model: GvpGnnModel,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    val_dataset: Sequence[Sample] | None = None,
) -> tuple[GvpGnnModel, History]:
    """Train a copy of ``model`` with Adam; the input model is left unchanged.

    Shuffling and dropout draw from two generators seeded from ``cfg.seed``,
    so a fixed seed reproduces the run bit for bit. The metric column is
    computed on the validation set when given, otherwise on the training set.
    """
    if not dataset:
        raise ContractViolation("training needs a non-empty dataset")
    model = model.copy()
    shuffle_rng = np.random.default_rng([cfg.seed, 0])
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    optimizer = Adam.from_config(model.params, cfg)
    history = History()
    steps = 0

    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        order = shuffle_rng.permutation(len(dataset))
        total = 0.0
        seen = 0
        for batch_index, start in enumerate(range(0, len(dataset), cfg.batch_size)):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            tape = Tape()
            outputs = record_forward(
                tape, model.bind(tape), model.config, [s.graphs for s in batch], True, dropout_rng
            )
            loss = record_loss(outputs, stack_targets(batch), cfg.loss)
            value = loss.value.item()
            if not math.isfinite(value):
                raise NumericError(
                    f"non-finite loss {value} at epoch {epoch}, batch {batch_index}",
                    epoch=epoch,
                    batch=batch_index,
                )
            model.params = optimizer.step(model.params, ad.backward(tape, loss))
            steps += 1
            total += value * len(batch)
            seen += len(batch)
            logger.debug(f"Epoch {epoch} batch {batch_index}: loss {value:.6g}")

        train_loss = total / seen
        if val_dataset:
            val_loss, metric = evaluate(model, val_dataset, cfg.loss, cfg.metric)
        else:
            val_loss = math.nan
            metric = math.nan if cfg.metric is None else evaluate(model, dataset, cfg.loss, cfg.metric)[1]
        history.append(train_loss, val_loss, metric)
        logger.info(
            f"Epoch {epoch}: train_loss={train_loss:.6g} val_loss={val_loss:.6g} metric={metric:.6g}"
        )
    return model, history


def smooth_history(series: Sequence[float], sigma: float = 2.0) -> np.ndarray:
    """Gaussian smoothing in epoch units, truncated at +-4 sigma and renormalized at the ends."""
    if not sigma > 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")
    x = np.asarray(series, dtype=np.float64)
    radius = math.ceil(4.0 * sigma)
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    out = np.empty_like(x)
    for i in range(x.size):
        lo = max(0, i - radius)
        hi = min(x.size, i + radius + 1)
        weights = kernel[lo - i + radius : hi - i + radius]
        out[i] = np.sum(weights * x[lo:hi]) / np.sum(weights)
    return out


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def load_structure(path: str | Path, cfg: ModelConfig) -> MolGraph:
    """Read a native graph file, or featurize an XYZ file for ``cfg``."""
    path = Path(path)
    if path.suffix.lower() == ".xyz":
        atoms = parse_xyz(path.read_text(encoding="utf-8"))
        if not cfg.keep_hydrogens:
            atoms = strip_hydrogens(atoms)
        return featurize(atoms, cfg.element_vocab, cfg.cutoff, cfg.edge_scalar)
    graph = load_graph(path)
    if graph.cutoff != cfg.cutoff:
        logger.warning(f"{path} was built with cutoff {graph.cutoff}, model uses {cfg.cutoff}")
    return graph


def parse_manifest(text: str, cfg: ModelConfig, base_dir: str | Path = ".") -> list[Sample]:
    base = Path(base_dir)
    per_sample = cfg.graphs_per_sample
    cache: dict[Path, MolGraph] = {}
    samples = []
    for number, line in enumerate(text.splitlines(), start=1):
        fields = line.split("#", 1)[0].split()
        if not fields:
            continue
        if len(fields) <= per_sample:
            raise ParseError(
                f"expected {per_sample} graph path(s) and at least one target", line=number
            )
        graphs = []
        for field in fields[:per_sample]:
            path = Path(field)
            if not path.is_absolute():
                path = base / path
            if path not in cache:
                try:
                    cache[path] = load_structure(path, cfg)
                except OSError as e:
                    raise ParseError(f"cannot read {path}: {e.strerror}", line=number) from e
                except GvpError as e:
                    raise ParseError(f"{path}: {e}", line=number) from e
            graphs.append(cache[path])
        try:
            target = np.array([float(v) for v in fields[per_sample:]])
        except ValueError:
            raise ParseError(f"malformed target in {fields[per_sample:]}", line=number) from None
        samples.append(Sample(tuple(graphs), target))
    if not samples:
        raise ParseError("manifest lists no samples")
    logger.info(f"Loaded {len(samples)} samples ({len(cache)} structures)")
    return samples


def load_manifest(path: str | Path, cfg: ModelConfig) -> list[Sample]:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), cfg, path.parent)
