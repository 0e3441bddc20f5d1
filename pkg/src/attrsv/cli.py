from __future__ import annotations
import functools
import logging
from pathlib import Path
import click
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.table import Table
from attrsv import pipeline
from attrsv.config import RunConfig, default_config_toml, load_config
from attrsv.errors import AttrsvError, ConfigError
from attrsv.explain import render_explanation

console = Console()
err_console = Console(stderr=True)


def _configure_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(message)s",
        handlers=[RichHandler(console=err_console, show_path=False)],
        force=True,
    )


def _fail(e: AttrsvError | ValidationError) -> None:
    err_console.print(f"[red]Error:[/red] {escape(str(e))}")
    raise SystemExit(e.exit_code if isinstance(e, AttrsvError) else ConfigError.exit_code)


def run_options(fn):
    """--config plus the flags that override it."""

    @click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
                  help="TOML config file (see 'attrsv init')")
    @click.option("--seed", type=int, default=None, help="Global seed")
    @click.option("--work-dir", type=click.Path(path_type=Path), default=None, help="Artifact directory")
    @click.option("--workers", type=int, default=None, help="Worker processes for extraction and fitting")
    @functools.wraps(fn)
    def wrapper(config_path, seed, work_dir, workers, **kwargs):
        try:
            config = load_config(config_path, seed=seed, work_dir=work_dir, workers=workers)
            return fn(config, **kwargs)
        except (AttrsvError, ValidationError) as e:
            _fail(e)

    return wrapper


@click.group()
@click.option("--verbose", is_flag=True, help="Show progress and training logs")
def cli(verbose: bool):
    """attrsv: explainable speaker verification from speaker attributes."""
    _configure_logging(verbose)


@cli.command()
@click.argument("path", type=click.Path(path_type=Path), default=Path("attrsv.toml"))
@click.option("--force", is_flag=True, help="Overwrite an existing file")
def init(path: Path, force: bool):
    """Write a config file holding every default."""
    if path.exists() and not force:
        err_console.print(f"[red]Error:[/red] {path} already exists (use --force to overwrite).")
        raise SystemExit(ConfigError.exit_code)
    path.write_text(default_config_toml())
    console.print(f"[green]✓[/green] Wrote [bold]{path}[/bold]")


@cli.command()
@run_options
def synth(config: RunConfig):
    """Generate the synthetic attribute-labelled corpus."""
    summary = pipeline.synth(config, pipeline.open_store(config))
    console.print(
        f"[green]✓[/green] {summary.train_speakers} train / {summary.test_speakers} test speakers, "
        f"{summary.clips} clips (schema {summary.schema_hash})"
    )


@cli.command()
@run_options
def extract(config: RunConfig):
    """Compute MFCCs and speaker embeddings for every clip."""
    summary = pipeline.extract(config, pipeline.open_store(config))
    console.print(f"[green]✓[/green] Features for {summary.clips} clips ({summary.features_written} updated)")
    for route, source in summary.embedding_routes.items():
        console.print(f"  {route}: {source} embeddings")


@cli.command("train-attr")
@run_options
def train_attr(config: RunConfig):
    """Train the stage-1 attribute classifiers for every route."""
    results = pipeline.train_attr(config, pipeline.open_store(config))
    table = Table(title="Stage-1 held-out accuracy")
    table.add_column("route")
    table.add_column("attribute")
    table.add_column("final loss", justify="right")
    table.add_column("accuracy", justify="right")
    for r in results:
        table.add_row(r.route, r.attribute, f"{r.final_loss:.4f}", f"{r.test_accuracy:.3f}")
    console.print(table)


@cli.command("make-trials")
@run_options
def make_trials(config: RunConfig):
    """Sample train and test trial lists."""
    for s in pipeline.make_trials(config, pipeline.open_store(config)):
        note = ""
        if s.positives_resampled or s.negatives_resampled:
            note = " [yellow](pool exhausted, resampled with replacement)[/yellow]"
        console.print(f"[green]✓[/green] {s.split}: {s.positives} positive / {s.negatives} negative{note}")


@cli.command("train-sv")
@run_options
def train_sv(config: RunConfig):
    """Build similarity vectors and fit the stage-2 verifiers."""
    for s in pipeline.train_sv(config, pipeline.open_store(config)):
        console.print(f"[green]✓[/green] {s.route}/{s.mode}: {', '.join(s.kinds)} on {s.train_trials} trials")


@cli.command("eval")
@run_options
@click.option("--attributes", default=None, help="Comma-separated attribute subset to evaluate")
def eval_cmd(config: RunConfig, attributes: str | None):
    """Score the test trials and write the EER report."""
    subset = [a.strip() for a in attributes.split(",") if a.strip()] if attributes else None
    report = pipeline.evaluate(config, pipeline.open_store(config), subset)

    table = Table(title=f"EER ({', '.join(report.attributes)})")
    table.add_column("route")
    table.add_column("mode")
    kinds = list(dict.fromkeys(s.kind for s in report.systems))
    for kind in kinds:
        table.add_column(kind, justify="right")
    rows: dict[tuple[str, str], dict[str, float]] = {}
    for s in report.systems:
        rows.setdefault((s.route, s.mode), {})[s.kind] = s.eer.eer
    for (route, mode), cells in rows.items():
        table.add_row(route, mode, *[f"{cells[k]:.4f}" if k in cells else "" for k in kinds])
    console.print(table)


@cli.command()
@run_options
@click.option("--trial", "trial", required=True, help='Two clip ids, e.g. "spk0160-u00 spk0161-u03"')
@click.option("--route", default="ac", show_default=True)
@click.option("--mode", type=click.Choice(["softmax", "hard"]), default="softmax", show_default=True)
@click.option("--kind", type=click.Choice(["linreg", "logreg", "forest", "nn"]), default="linreg", show_default=True)
@click.option("--format", "fmt", type=click.Choice(["text", "json"]), default="text", show_default=True)
def explain(config: RunConfig, trial: str, route: str, mode: str, kind: str, fmt: str):
    """Explain one verification decision attribute by attribute."""
    parts = trial.split()
    if len(parts) != 2:
        raise ConfigError(f"--trial needs exactly two clip ids, got {trial!r}")
    explanation = pipeline.explain(config, pipeline.open_store(config), parts[0], parts[1], route, mode, kind)
    # plain print keeps JSON free of rich markup
    click.echo(render_explanation(explanation, fmt))
