"""
prunetax CLI Application.

Trains small CNNs, prunes them channel by channel under any signal of
the saliency taxonomy, and analyses the results.

Commands:
    make-dataset        - Write a synthetic PRND dataset
    train               - Train the configured network from scratch
    list-signals        - Print the enumerated signal ids
    prune               - Run one signal with or without retraining
    sweep               - Run many signals and write a summary
    pareto              - Non-dominated signals in (sparsity, accuracy)
    compare-reductions  - Signals that differ only in the reduction
    retrain-report      - Retraining effort vs sparsity reached
    categories          - Best signal per information category
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import NoReturn, Optional

import typer
from pydantic import BaseModel, ValidationError
from rich.console import Console
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, TextColumn, TimeElapsedColumn
from rich.table import Table

from prunetax.core.config import ExperimentConfig
from prunetax.core.engine import accuracy
from prunetax.core.errors import PruneTaxError, UnknownSignalError
from prunetax.core.log import configure_logging
from prunetax.core.mask import PruneMask
from prunetax.core.network import NetworkGraph, build_network, get_architecture
from prunetax.core.precision import default_dtype
from prunetax.core.records import (
    ResultRow,
    SummaryRow,
    read_results_csv,
    read_summary_csv,
    rows_to_csv,
    write_results_csv,
)
from prunetax.core.signals import (
    PUBLISHED_SIGNALS,
    SignalSpec,
    ValidityRules,
    enumerate_signals,
    resolve_signal,
    resolve_signals,
)
from prunetax.core.storage import atomic_write_text
from prunetax.services.analysis import (
    ReductionImprovement,
    ReductionMean,
    RetrainPoint,
    category_report,
    compare_reductions,
    pareto_front,
    pareto_points,
    retrain_report,
    summaries_from_results,
)
from prunetax.services.checkpoint import load_checkpoint, save_checkpoint
from prunetax.services.datasets import DataSplits, load_splits, make_dataset, write_dataset
from prunetax.services.pruning import count_parameters
from prunetax.services.sweep import SweepLayout, find_summary, mode_name, run_signal, run_sweep
from prunetax.services.training import train as train_network

console = Console()

app = typer.Typer(
    name="prunetax",
    help="Channel pruning signals: enumerate, run and compare",
    add_completion=False,
)


@app.callback()
def _main(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging"),
) -> None:
    configure_logging(verbose)


# =============================================================================
# Helpers
# =============================================================================

def _fail(message: str) -> NoReturn:
    console.print(f"[red]{message}[/]")
    raise typer.Exit(1)


def _load_config(path: Path, out_dir: Optional[Path] = None) -> ExperimentConfig:
    if not path.exists():
        _fail(f"Config file not found: {path}")
    try:
        config = ExperimentConfig.load(path)
    except (ValidationError, ValueError, KeyError) as e:
        _fail(f"Invalid config {path}: {e}")
    if out_dir is not None:
        config = config.model_copy(update={"output_dir": out_dir})
    return config


def _build(config: ExperimentConfig, seed: int) -> NetworkGraph:
    if config.layers is not None:
        layers, input_shape = config.layers, config.input_shape
    else:
        try:
            arch = get_architecture(config.architecture, config.num_classes)
        except KeyError as e:
            _fail(str(e.args[0]))
        layers, input_shape = arch.layers, arch.input_shape
    try:
        return build_network(layers, input_shape, seed=seed, loss_kind=config.loss, dtype=default_dtype())
    except ValueError as e:
        _fail(f"Invalid network: {e}")


def _load_data(config: ExperimentConfig, net: NetworkGraph) -> DataSplits:
    try:
        data = load_splits(config.dataset_path, config.split, seed=config.seed, test_path=config.test_path, dtype=net.dtype)
    except (OSError, PruneTaxError) as e:
        _fail(f"Cannot read dataset: {e}")
    if data.retrain.image_shape != net.input_shape:
        _fail(f"Dataset images are {data.retrain.image_shape}, network expects {net.input_shape}")
    return data


def _load_model(path: Path) -> tuple[NetworkGraph, PruneMask]:
    if not path.exists():
        _fail(f"Checkpoint not found: {path}. Run 'train' first.")
    try:
        return load_checkpoint(path)
    except PruneTaxError as e:
        _fail(f"Unreadable checkpoint {path}: {e}")


def _write_csv(path: Path, rows: list[BaseModel], fields: tuple[str, ...]) -> None:
    atomic_write_text(path, rows_to_csv(rows, fields))
    console.print(f"[green]✓[/] Wrote {path}")


def _read_summaries(path: Path, baseline: Optional[float] = None) -> list[SummaryRow]:
    """Summaries from a sweep dir, a summary CSV or a per-step results CSV."""
    if path.is_dir():
        path = find_summary(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        header = next(csv.reader(f), [])
    if "sparsity_at_1pct" in header:
        return read_summary_csv(path)
    rows: list[ResultRow] = read_results_csv(path)
    baselines = {}
    if baseline is not None:
        baselines = {(r.signal_id, r.seed): baseline for r in rows}
    return summaries_from_results(rows, baselines)


# =============================================================================
# Data and training
# =============================================================================

@app.command("make-dataset")
def make_dataset_cmd(
    out: Path = typer.Option(..., "--out", help="Output PRND file"),
    kind: str = typer.Option("templates", "--kind", help="templates or separable"),
    count: int = typer.Option(5000, "--count", min=1),
    classes: int = typer.Option(10, "--classes", min=2, max=256, help="Class count (templates)"),
    channels: int = typer.Option(1, "--channels", min=1),
    size: int = typer.Option(28, "--size", min=4),
    noise: float = typer.Option(0.6, "--noise", min=0.0, help="Pixel noise (templates)"),
    seed: int = typer.Option(0, "--seed"),
) -> None:
    """Write a synthetic dataset file."""
    shape = (channels, size, size)
    options: dict[str, object] = {"shape": shape}
    if kind == "templates":
        options.update(num_classes=classes, noise=noise)
    try:
        data = make_dataset(kind, count, seed=seed, **options)
    except KeyError as e:
        _fail(str(e.args[0]))
    write_dataset(out, data)
    console.print(f"[green]✓[/] {len(data)} images {shape}, {data.num_classes} classes -> {out}")


@app.command()
def train(
    config_path: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed for initialization"),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir", help="Override output_dir"),
) -> None:
    """Train the configured network from scratch and save a checkpoint."""
    config = _load_config(config_path, out_dir)
    init_seed = config.seed if seed is None else seed
    net = _build(config, init_seed)
    data = _load_data(config, net)

    console.print(f"\n[bold cyan]Training {config.architecture}[/] ({net.parameter_count():,} parameters)\n")
    layers = Table(show_header=True, header_style="bold cyan", box=None)
    for column in ("#", "Layer", "Kind", "Output", "Params"):
        layers.add_column(column, justify="right" if column in ("#", "Params") else "left")
    for row in net.describe():
        layers.add_row(
            str(row["index"]), str(row["name"]), str(row["kind"]),
            "x".join(str(d) for d in row["output"]), f"{row['params']:,}",
        )
    console.print(layers)

    with console.status("[bold green]Training...") as status:
        report = train_network(
            net, data.retrain, config.training, seed=init_seed,
            on_log=lambda step, loss: status.update(f"[bold green]Training... step {step} loss {loss:.4f}"),
        )

    table = Table(title="Accuracy", show_header=True, header_style="bold cyan")
    table.add_column("Split")
    table.add_column("Samples", justify="right")
    table.add_column("Top-1", justify="right")
    for name, split in (("retrain", data.retrain), ("eval", data.eval), ("test", data.test)):
        table.add_row(name, str(len(split)), f"{accuracy(net, split.batches(256)):.4f}")
    console.print(table)
    console.print(f"Final loss: {report.final_loss:.4f}")

    save_checkpoint(config.checkpoint, net, PruneMask.empty(net))
    console.print(f"[green]✓[/] Saved {config.checkpoint}")


# =============================================================================
# Signals
# =============================================================================

@app.command("list-signals")
def list_signals(
    rules: str = typer.Option("default", "--rules", help="default or full"),
    published: bool = typer.Option(False, "--published", help="Show the published-signal catalogue"),
) -> None:
    """Print every signal id, one per line, then the total."""
    if published:
        table = Table(title="Published signals", show_header=True, header_style="bold cyan")
        table.add_column("Name")
        table.add_column("Signal id", style="cyan")
        table.add_column("Category")
        table.add_column("Note", style="dim")
        for entry in PUBLISHED_SIGNALS:
            table.add_row(entry.name, entry.spec.id, entry.spec.category.value, entry.note)
        console.print(table)
        return
    try:
        validity = ValidityRules.named(rules)
    except KeyError as e:
        _fail(str(e.args[0]))
    specs = enumerate_signals(validity)
    for spec in specs:
        console.print(spec.id, highlight=False, soft_wrap=True)
    console.print(f"{len(specs)} signals", highlight=False)


@app.command()
def prune(
    config_path: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    signal: str = typer.Option(..., "--signal", help="Signal id or published name"),
    retrain: str = typer.Option("on", "--retrain", help="on or off"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir"),
) -> None:
    """Prune the trained network with one signal."""
    if retrain not in ("on", "off"):
        _fail("--retrain must be 'on' or 'off'")
    config = _load_config(config_path, out_dir)
    try:
        spec = resolve_signal(signal)
    except UnknownSignalError as e:
        _fail(str(e))
    net, _ = _load_model(config.checkpoint)
    data = _load_data(config, net)
    run_seed = config.seed if seed is None else seed

    with console.status(f"[bold green]Pruning with {spec.id}..."):
        run = run_signal(net, spec, data, config.harness, run_seed, retrain == "on")
    if run.summary.status != "ok":
        _fail(f"Pruning failed: {run.summary.message}")

    target = config.output_dir / "prune" / mode_name(retrain == "on")
    write_results_csv(target / f"{spec.id}.csv", run.rows)
    save_checkpoint(target / f"{spec.id}.prnw", run.session.net, run.session.mask)

    s = run.summary
    counts = count_parameters(run.session.net, run.session.mask)
    console.print(Panel(
        f"Steps: {s.steps}  (stopped: {run.session.stop_reason})\n"
        f"Initial test accuracy: {s.initial_test_acc:.4f}\n"
        f"At 1% drop: sparsity {s.sparsity_at_1pct:.4f}, test {s.test_acc_at_1pct:.4f}, "
        f"retrain steps {s.retrain_steps_at_1pct}\n"
        f"At stop: sparsity {s.sparsity_at_stop:.4f}, test {s.test_acc_at_stop:.4f}\n"
        f"Conv weights remaining: {counts['conv_weights_remaining']:,} / {counts['conv_weights']:,}",
        title=spec.id,
        border_style="cyan",
    ))
    console.print(f"[green]✓[/] Results in {target}")


@app.command()
def sweep(
    config_path: Path = typer.Option(..., "--config", help="Experiment config JSON"),
    signals: Optional[str] = typer.Option(None, "--signals", help="Comma list, 'all' or 'published'; default from config"),
    retrain: str = typer.Option("on", "--retrain", help="on, off or both"),
    threads: Optional[int] = typer.Option(None, "--threads", min=1),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir"),
) -> None:
    """Run many signals against the trained network."""
    if retrain not in ("on", "off", "both"):
        _fail("--retrain must be 'on', 'off' or 'both'")
    config = _load_config(config_path, out_dir)
    try:
        specs: list[SignalSpec] = resolve_signals(signals.split(",")) if signals else config.signal_specs()
    except UnknownSignalError as e:
        _fail(str(e))
    net, _ = _load_model(config.checkpoint)
    data = _load_data(config, net)
    modes = 2 if retrain == "both" else 1
    sweep_dir = config.output_dir / "sweep"

    progress = Progress(
        TextColumn("[bold green]Sweeping"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
    )
    with progress:
        task = progress.add_task("sweep", total=len(specs) * modes)
        results = run_sweep(
            net, specs, data, config.harness, sweep_dir,
            seed=config.seed if seed is None else seed,
            retrain=retrain,
            threads=threads or config.threads,
            on_done=lambda _row: progress.advance(task),
        )

    for mode, rows in results.items():
        failed = [r for r in rows if r.status != "ok"]
        console.print(f"[green]✓[/] {mode}: {len(rows) - len(failed)} ok, {len(failed)} failed -> {sweep_dir / mode}")
        for row in failed:
            console.print(f"  [red]{row.signal_id}[/]: {row.message}")
        ok = [r for r in rows if r.status == "ok"]
        if ok:
            best = max(ok, key=lambda r: r.sparsity_at_1pct)
            total = net.conv_weight_count()
            remaining = total - round(best.sparsity_at_1pct * total)
            console.print(
                f"  Best: [cyan]{best.signal_id}[/] sparsity {best.sparsity_at_1pct:.4f} "
                f"({remaining:,} / {total:,} conv weights left) at test {best.test_acc_at_1pct:.4f}"
            )


# =============================================================================
# Analysis
# =============================================================================

@app.command()
def pareto(
    summary: Path = typer.Option(..., "--summary", help="Sweep dir, summary.csv or per-step results CSV"),
    operating: str = typer.Option("1pct", "--operating-point", help="1pct or stop"),
    baseline: Optional[float] = typer.Option(None, "--baseline", help="Initial test accuracy for per-step CSVs"),
    out: Optional[Path] = typer.Option(None, "--out", help="Write the front as CSV"),
) -> None:
    """Signals on the (sparsity, accuracy) Pareto front."""
    if operating not in ("1pct", "stop"):
        _fail("--operating-point must be '1pct' or 'stop'")
    try:
        rows = _read_summaries(summary, baseline)
    except (OSError, ValueError) as e:
        _fail(f"Cannot read {summary}: {e}")
    points = pareto_points(rows, operating)
    if not points:
        _fail(f"No successful runs in {summary}")
    front = pareto_front(points)

    table = Table(title=f"Pareto front ({operating})", show_header=True, header_style="bold cyan")
    table.add_column("Signal")
    table.add_column("Sparsity", justify="right")
    table.add_column("Test acc", justify="right")
    for point in front:
        table.add_row(point.signal_id, f"{point.sparsity:.4f}", f"{point.accuracy:.4f}")
    console.print(table)
    if out is not None:
        _write_csv(out, front, ("signal_id", "sparsity", "accuracy"))


@app.command("compare-reductions")
def compare_reductions_cmd(
    sweep_dir: Path = typer.Option(..., "--sweep-dir"),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir", help="Where to write the CSVs; default the sweep dir"),
) -> None:
    """Sparsity gained by replacing the sum reduction with each alternative."""
    try:
        rows = _read_summaries(sweep_dir)
        pairs, means = compare_reductions(rows)
    except (OSError, ValueError, PruneTaxError) as e:
        _fail(f"Cannot compare reductions in {sweep_dir}: {e}")

    table = Table(title="Improvement over sum", show_header=True, header_style="bold cyan")
    table.add_column("Reduction")
    table.add_column("Pairs", justify="right")
    table.add_column("Mean improvement", justify="right")
    for m in means:
        table.add_row(m.reduction, str(m.pairs), f"{m.mean_improvement:+.4f}")
    console.print(table)

    target = out_dir or (sweep_dir if sweep_dir.is_dir() else sweep_dir.parent)
    _write_csv(target / "reduction_improvements.csv", pairs, tuple(ReductionImprovement.model_fields))
    _write_csv(target / "reduction_means.csv", means, tuple(ReductionMean.model_fields))


@app.command("retrain-report")
def retrain_report_cmd(
    sweep_dir: Path = typer.Option(..., "--sweep-dir", help="Sweep root holding retrain_on/ and retrain_off/"),
    min_sparsity: float = typer.Option(0.0, "--min-sparsity", min=0.0),
    out: Optional[Path] = typer.Option(None, "--out", help="CSV path; default <sweep-dir>/retrain_report.csv"),
) -> None:
    """Retraining steps spent against sparsity reached without retraining."""
    on_layout = SweepLayout(sweep_dir / mode_name(True))
    off_layout = SweepLayout(sweep_dir / mode_name(False))
    for layout in (on_layout, off_layout):
        if not layout.summary.exists():
            _fail(f"Missing {layout.summary}; run 'sweep --retrain both' first")
    with_retrain = read_summary_csv(on_layout.summary)
    runs = {}
    for row in with_retrain:
        path = on_layout.run_csv(row.signal_id)
        if row.status == "ok" and path.exists():
            runs[row.signal_id] = read_results_csv(path)
    report = retrain_report(with_retrain, read_summary_csv(off_layout.summary), min_sparsity, runs)

    table = Table(title="Retraining effort", show_header=True, header_style="bold cyan")
    table.add_column("Signal")
    table.add_column("Sparsity w/o retrain", justify="right")
    table.add_column("Retrain steps", justify="right")
    table.add_column("Sparsity w/ retrain", justify="right")
    for p in sorted(report.points, key=lambda p: -p.sparsity_no_retrain):
        table.add_row(p.signal_id, f"{p.sparsity_no_retrain:.4f}", f"{p.retrain_steps:.0f}", f"{p.sparsity_with_retrain:.4f}")
    console.print(table)
    for signal_id in report.missing:
        console.print(f"[yellow]⚠ {signal_id} is missing from one of the sweeps; excluded[/]")
    if report.spearman is None:
        console.print("[yellow]Too few distinct points for a rank correlation.[/]")
    else:
        console.print(f"Spearman rho = {report.spearman:.3f} (p = {report.pvalue:.3g})")
    _write_csv(out or sweep_dir / "retrain_report.csv", report.points, tuple(RetrainPoint.model_fields))


@app.command()
def categories(
    sweep_dir: Path = typer.Option(..., "--sweep-dir"),
) -> None:
    """Best signal per category: weights only, feature maps, or gradient information."""
    try:
        rows = _read_summaries(sweep_dir)
    except (OSError, ValueError) as e:
        _fail(f"Cannot read {sweep_dir}: {e}")
    table = Table(title="Best signal per category", show_header=True, header_style="bold cyan")
    table.add_column("Category")
    table.add_column("Signals", justify="right")
    table.add_column("Best signal", style="cyan")
    table.add_column("Sparsity", justify="right")
    for best in category_report(rows):
        table.add_row(best.category, str(best.signals), best.signal_id, f"{best.sparsity:.4f}")
    console.print(table)


def main() -> None:
    """Main entry point."""
    app()


if __name__ == "__main__":
    main()
