"""
Command-line interface for gvp-gnn.

Usage:
    gvp-gnn-cli [options] <command> [command options]

Examples:
    gvp-gnn-cli --version
    gvp-gnn-cli graph-build --in water.xyz --out water.json
    gvp-gnn-cli train --manifest train.txt --config run.cfg --out model.ckpt
    gvp-gnn-cli eval --manifest test.txt --ckpt model.ckpt --metric rmse --metric spearman
    gvp-gnn-cli check-equivariance --random-model --graph water.json --trials 20
    gvp-gnn-cli demo-gate --out gate.txt

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 undefined metric,
5 property violation.
"""

from __future__ import annotations

import logging
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

import click

from . import __version__
from .config import ENV_LOG_LEVEL, ENV_SEED, _get_env_var, _load_env_file, render_config_text
from .enums import LossKind, MetricKind
from .exceptions import GvpError, NumericError, PropertyViolation, UndefinedMetricError
from .mol_graph import DEFAULT_CUTOFF, DEFAULT_RBF_COUNT, DEFAULT_VOCAB

METRIC_CHOICES = [kind.value for kind in MetricKind]
LOSS_CHOICES = [kind.value for kind in LossKind]


class InputError(click.ClickException):
    exit_code = 2


class NumericFailure(click.ClickException):
    exit_code = 3


class UndefinedMetric(click.ClickException):
    exit_code = 4


class PropertyFailure(click.ClickException):
    exit_code = 5


@contextmanager
def _exit_codes() -> Iterator[None]:
    """Translate library errors into ClickExceptions carrying the exit code."""
    try:
        yield
    except click.ClickException:
        raise
    except NumericError as e:
        raise NumericFailure(f"Numeric failure: {e}") from None
    except UndefinedMetricError as e:
        raise UndefinedMetric(f"Undefined metric: {e}") from None
    except PropertyViolation as e:
        raise PropertyFailure(f"Property violation: {e}") from None
    except (GvpError, ValueError) as e:
        raise InputError(str(e)) from None
    except OSError as e:
        raise InputError(f"I/O error: {e}") from None


def _configure_logging(verbose: bool) -> None:
    if verbose:
        level = logging.DEBUG
    else:
        name = (_get_env_var(ENV_LOG_LEVEL, "WARNING") or "WARNING").upper()
        level = logging.getLevelName(name)
        if not isinstance(level, int):
            raise InputError(f"Invalid {ENV_LOG_LEVEL}: {name}")
    package_logger = logging.getLogger("gvp_gnn")
    for handler in list(package_logger.handlers):
        package_logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    package_logger.addHandler(handler)
    package_logger.setLevel(level)


def _echo_settings(**values: object) -> None:
    """Print the resolved demo settings as ``key = value`` lines."""
    rendered = {
        key: ",".join(map(str, value)) if isinstance(value, (tuple, list)) else str(value)
        for key, value in values.items()
    }
    click.echo(render_config_text(rendered), nl=False)


def _write_report(text: str, out: str | None) -> None:
    click.echo(text, nl=False)
    if out:
        Path(out).write_text(text, encoding="utf-8")


@click.group()
@click.version_option(__version__, "-V", "--version", prog_name="gvp-gnn-cli")
@click.option("-v", "--verbose", is_flag=True, help="Log at DEBUG level to stderr")
def main(verbose: bool) -> None:
    """Geometric vector perceptrons and GVP-GNNs for atomic structures."""
    _load_env_file()
    _configure_logging(verbose)


@main.command("graph-build")
@click.option("--in", "input_path", required=True, type=click.Path(dir_okay=False), help="XYZ input file")
@click.option("--out", "output_path", required=True, type=click.Path(dir_okay=False), help="Graph JSON output")
@click.option("--cutoff", type=float, default=DEFAULT_CUTOFF, show_default=True, help="Edge cutoff in Angstrom")
@click.option("--keep-hydrogens", is_flag=True, help="Keep hydrogen atoms")
@click.option("--vocab", default=",".join(DEFAULT_VOCAB), show_default=True, help="Comma separated element symbols")
@click.option("--rbf-count", type=int, default=DEFAULT_RBF_COUNT, show_default=True, help="Number of RBF centers")
def graph_build(
    input_path: str,
    output_path: str,
    cutoff: float,
    keep_hydrogens: bool,
    vocab: str,
    rbf_count: int,
) -> None:
    """Featurize an XYZ structure into a native graph file."""
    from .config import _parse_str_list
    from .graph_io import save_graph
    from .mol_graph import ElementVocab, featurize, parse_xyz, strip_hydrogens

    with _exit_codes():
        atoms = parse_xyz(Path(input_path).read_text(encoding="utf-8"))
        if not keep_hydrogens:
            atoms = strip_hydrogens(atoms)
        graph = featurize(atoms, ElementVocab(_parse_str_list(vocab)), cutoff, rbf_count)
        save_graph(graph, output_path)
    click.echo(f"{graph.num_nodes} nodes, {graph.num_edges} edges")


@main.command()
@click.option("--manifest", required=True, type=click.Path(dir_okay=False), help="Training manifest")
@click.option("--val-manifest", type=click.Path(dir_okay=False), help="Validation manifest")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run config (key = value)")
@click.option("--out", "output_path", required=True, type=click.Path(dir_okay=False), help="Checkpoint output")
@click.option("--history", "history_path", type=click.Path(dir_okay=False), help="History CSV (default: <out>.history.csv)")
@click.option("--init-from", type=click.Path(dir_okay=False), help="Checkpoint to transfer from")
@click.option(
    "--transfer-prefixes",
    help="Comma separated tensor patterns to transfer (default: embed.*,layer.0.*,layer.1.*)",
)
@click.option("--seed", type=int, envvar=ENV_SEED, help="Seed for initialization, shuffling and dropout")
@click.option("--epochs", type=int, help="Override max_epochs")
@click.option("--lr", type=float, help="Override lr")
@click.option("--batch-size", type=int, help="Override batch_size")
@click.option("--max-steps", type=int, help="Override max_steps")
def train(
    manifest: str,
    val_manifest: str | None,
    config_path: str | None,
    output_path: str,
    history_path: str | None,
    init_from: str | None,
    transfer_prefixes: str | None,
    seed: int | None,
    epochs: int | None,
    lr: float | None,
    batch_size: int | None,
    max_steps: int | None,
) -> None:
    """Train a model on a manifest and write a checkpoint plus its history."""
    from .checkpoint import DEFAULT_TRANSFER_PATTERNS, read_checkpoint, save_checkpoint, transfer_load
    from .config import _parse_str_list
    from .gnn import GvpGnnModel
    from .run_config import RunConfig
    from .train import load_manifest, train_loop

    with _exit_codes():
        run = RunConfig.from_file(
            config_path,
            {"seed": seed, "max_epochs": epochs, "lr": lr, "batch_size": batch_size, "max_steps": max_steps},
        )
        click.echo(run.render(), nl=False)
        dataset = load_manifest(manifest, run.model)
        val = load_manifest(val_manifest, run.model) if val_manifest else None
        model = GvpGnnModel(run.model)
        if init_from:
            patterns = _parse_str_list(transfer_prefixes) if transfer_prefixes is not None else DEFAULT_TRANSFER_PATTERNS
            model, report = transfer_load(read_checkpoint(init_from), model, patterns)
            click.echo(f"transferred {len(report.transferred)} tensors from {init_from}")
        model, history = train_loop(model, dataset, run.train, val)
        save_checkpoint(model, output_path)
        history_file = Path(history_path or f"{output_path}.history.csv")
        history_file.write_text(history.to_csv(), encoding="utf-8")

    click.echo(f"epochs {history.epochs}")
    if history.epochs:
        click.echo(f"final_train_loss {history.train_loss[-1]!r}")
    click.echo(f"checkpoint {output_path}")
    click.echo(f"history {history_file}")


@main.command("eval")
@click.option("--manifest", required=True, type=click.Path(dir_okay=False), help="Evaluation manifest")
@click.option("--ckpt", required=True, type=click.Path(dir_okay=False), help="Model checkpoint")
@click.option(
    "--metric",
    "metrics",
    multiple=True,
    type=click.Choice(METRIC_CHOICES, case_sensitive=False),
    help="Metric to report (repeatable; default mae and rmse)",
)
@click.option(
    "--loss",
    type=click.Choice(LOSS_CHOICES, case_sensitive=False),
    default=LossKind.MSE.value,
    show_default=True,
    help="How outputs are read: regression values or class logits",
)
def eval_command(manifest: str, ckpt: str, metrics: tuple[str, ...], loss: str) -> None:
    """Evaluate a checkpoint; prints one "name value" line per metric."""
    from .checkpoint import load_checkpoint
    from .metrics import compute_metric
    from .train import load_manifest, metric_scores, predict_dataset, stack_targets

    kinds = [MetricKind(m.lower()) for m in metrics] or [MetricKind.MAE, MetricKind.RMSE]
    with _exit_codes():
        model = load_checkpoint(ckpt)
        samples = load_manifest(manifest, model.config)
        scores = metric_scores(predict_dataset(model, samples), LossKind(loss.lower()))
        targets = stack_targets(samples).ravel()
        values = [(kind, compute_metric(scores, targets, kind)) for kind in kinds]
    for kind, value in values:
        click.echo(f"{kind.value} {value!r}")


@main.command("check-equivariance")
@click.option("--ckpt", type=click.Path(dir_okay=False), help="Model checkpoint")
@click.option("--random-model", is_flag=True, help="Audit a freshly initialized model")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Run config for --random-model")
@click.option("--graph", "graph_path", required=True, type=click.Path(dir_okay=False), help="Graph JSON or XYZ file")
@click.option("--trials", type=int, default=100, show_default=True, help="Transforms per class")
@click.option("--tol", type=float, default=1e-10, show_default=True, help="Maximum relative deviation")
@click.option("--seed", type=int, envvar=ENV_SEED, default=0, show_default=True, help="First trial seed")
def check_equivariance_command(
    ckpt: str | None,
    random_model: bool,
    config_path: str | None,
    graph_path: str,
    trials: int,
    tol: float,
    seed: int,
) -> None:
    """Audit invariance of outputs and equivariance of node states."""
    from .audit import check_equivariance
    from .checkpoint import load_checkpoint
    from .gnn import GvpGnnModel
    from .run_config import RunConfig
    from .train import load_structure

    if bool(ckpt) == random_model:
        raise InputError("Give exactly one of --ckpt or --random-model")
    with _exit_codes():
        if ckpt:
            model = load_checkpoint(ckpt)
        else:
            run = RunConfig.from_file(config_path, {"seed": seed})
            click.echo(run.render(), nl=False)
            model = GvpGnnModel(run.model)
        graph = load_structure(graph_path, model.config)
        report = check_equivariance(model, graph, trials=trials, tol=tol, seed=seed)
        click.echo(report.render(), nl=False)
        if not report.ok:
            worst = report.worst
            raise PropertyViolation(
                f"{worst.kind.value} deviation {worst.deviation:.3e} exceeds {tol:.3e} "
                f"(worst transform seed {worst.worst_seed})"
            )


@main.command("demo-gate")
@click.option("--out", type=click.Path(dir_okay=False), help="Report output file")
@click.option("--seed", type=int, envvar=ENV_SEED, default=0, show_default=True)
@click.option("--steps", type=int, default=5000, show_default=True, help="Adam steps per model")
def demo_gate_command(out: str | None, seed: int, steps: int) -> None:
    """Gated vs ungated GVP on a target only scalar-to-vector routing can fit."""
    from .demos import demo_gate

    with _exit_codes():
        _echo_settings(seed=seed, steps=steps)
        report = demo_gate(seed=seed, steps=steps)
        _write_report(report.render(), out)
        report.check()


@main.command("demo-approx")
@click.option("--nu", type=int, default=5, show_default=True, help="Input vector channels (>= 3)")
@click.option("--width", "widths", type=int, multiple=True, help="Stack width (repeatable; default 64, the baseline 8 always runs)")
@click.option("--out", type=click.Path(dir_okay=False), help="Report output file")
@click.option("--seed", type=int, envvar=ENV_SEED, default=0, show_default=True)
@click.option("--steps", type=int, default=4000, show_default=True, help="Adam steps per width")
def demo_approx_command(nu: int, widths: tuple[int, ...], out: str | None, seed: int, steps: int) -> None:
    """Fit an equivariant vector-valued target with gated GVP stacks of growing width."""
    from .demos import APPROX_BASELINE_WIDTH, demo_approx

    resolved = tuple(sorted(set(widths or (APPROX_BASELINE_WIDTH, 64)) | {APPROX_BASELINE_WIDTH}))
    if len(resolved) < 2:
        raise InputError(f"--width needs a width other than the baseline {APPROX_BASELINE_WIDTH}")
    with _exit_codes():
        _echo_settings(nu=nu, widths=resolved, seed=seed, steps=steps)
        report = demo_approx(nu=nu, widths=resolved, seed=seed, steps=steps)
        _write_report(report.render(), out)
        report.check()


@main.command("demo-transfer")
@click.option("--seeds", type=int, default=3, show_default=True, help="Number of seeds (0..n-1)")
@click.option("--pretrain-epochs", type=int, default=10, show_default=True)
@click.option("--finetune-epochs", type=int, default=8, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), help="Report output file")
def demo_transfer_command(seeds: int, pretrain_epochs: int, finetune_epochs: int, out: str | None) -> None:
    """Pretrain, transfer the first layers and compare fine-tuning with training from scratch."""
    from .demos import demo_transfer

    with _exit_codes():
        _echo_settings(seeds=seeds, pretrain_epochs=pretrain_epochs, finetune_epochs=finetune_epochs)
        report = demo_transfer(range(seeds), pretrain_epochs, finetune_epochs)
        _write_report(report.render(), out)
        report.check()


@main.command("smooth-history")
@click.option("--history", "history_path", required=True, type=click.Path(dir_okay=False), help="History CSV")
@click.option("--sigma", type=float, default=2.0, show_default=True, help="Gaussian width in epochs")
@click.option("--out", type=click.Path(dir_okay=False), help="Smoothed CSV output (default: stdout only)")
def smooth_history_command(history_path: str, sigma: float, out: str | None) -> None:
    """Gaussian-smooth every column of a history CSV."""
    from .models import History
    from .train import smooth_history

    with _exit_codes():
        history = History.from_csv(Path(history_path).read_text(encoding="utf-8"))
        smoothed = History(
            train_loss=smooth_history(history.train_loss, sigma).tolist(),
            val_loss=smooth_history(history.val_loss, sigma).tolist(),
            metric=smooth_history(history.metric, sigma).tolist(),
        )
        _write_report(smoothed.to_csv(), out)


if __name__ == "__main__":
    main()
