"""
cli.py – Command-line entry point: train, sample, ledger and sweep.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Annotated, NoReturn, Optional

import typer
from pydantic import ValidationError
from rich import box
from rich.console import Console
from rich.table import Table

from app.config import configure_logging, get_settings
from app.errors import NanoFlowError
from app.schemas.config import ExperimentSpec, ModelConfig
from app.services.experiments import ResultTable, dump_samples, resolve_combinations, run_experiment
from app.services.flow_model import build_model, count_parameters

app = typer.Typer(
    name="nanoflow",
    help="Parameter-shared normalizing flows: training, sampling, ledgers and experiment sweeps",
    add_completion=False,
    rich_markup_mode="rich",
)
console = Console()
logger = logging.getLogger(__name__)

ConfigOpt = Annotated[Optional[Path], typer.Option("--config", "-c", help="JSON ExperimentSpec document")]
OutOpt = Annotated[Optional[Path], typer.Option("--out", "-o", help="Output directory")]
SeedOpt = Annotated[Optional[int], typer.Option("--seed", help="Run a single replicate seed")]
ThreadsOpt = Annotated[Optional[int], typer.Option("--threads", min=1, help="Worker processes for sweeps")]


def _fail(exc: Exception) -> NoReturn:
    console.print(f"[bold red]error:[/bold red] {exc}")
    raise typer.Exit(code=1)


def _load_spec(config: Path | None, seed: int | None) -> ExperimentSpec:
    spec = ExperimentSpec() if config is None else ExperimentSpec.model_validate_json(config.read_text())
    if seed is not None:
        spec = spec.model_copy(update={"seeds": [seed]})
    return spec


def _print_rows(table: ResultTable) -> None:
    out = Table(title=f"[bold cyan]{table.experiment}[/bold cyan]", box=box.ROUNDED, header_style="bold magenta")
    for col in ("combination", "scheme", "coupling", "G", "K", "shared", "seed", "params", "eval LL/dim", "bpd"):
        out.add_column(col)
    for r in table.rows:
        out.add_row(
            str(r.combination), r.scheme, r.coupling, str(r.groups), str(r.flows), str(r.shared_layers),
            str(r.seed), f"{r.param_total:,}",
            "[red]diverged[/red]" if r.diverged else f"{r.eval_ll:.5f}",
            "-" if r.bpd is None else f"{r.bpd:.4f}",
        )
    console.print(out)
    if table.verdicts:
        console.print_json(json.dumps(table.verdicts))


def _run(spec: ExperimentSpec, out: Path | None, threads: int | None) -> None:
    settings = get_settings()
    if out is None:
        out = Path(spec.output_dir) if spec.output_dir else Path(settings.OUTPUT_DIR) / spec.experiment
    table = run_experiment(spec, out, threads or settings.THREADS)
    _print_rows(table)
    console.print(f"[dim]results written to[/dim] [bold green]{out}[/bold green]")


@app.callback()
def main(log_level: Annotated[Optional[str], typer.Option("--log-level", help="Override NANOFLOW_LOG_LEVEL")] = None):
    configure_logging(log_level)


@app.command()
def train(config: ConfigOpt = None, out: OutOpt = None, seed: SeedOpt = None, threads: ThreadsOpt = None):
    """Train the spec's model (one run per seed) and write checkpoints and metrics."""
    try:
        spec = _load_spec(config, seed).model_copy(update={"experiment": "train"})
        _run(spec, out, threads)
    except (NanoFlowError, ValidationError, OSError) as exc:
        _fail(exc)


@app.command()
def sweep(config: ConfigOpt = None, out: OutOpt = None, seed: SeedOpt = None, threads: ThreadsOpt = None):
    """Run the experiment named in the spec over its sweep lists and seeds."""
    try:
        _run(_load_spec(config, seed), out, threads)
    except (NanoFlowError, ValidationError, OSError) as exc:
        _fail(exc)


@app.command()
def sample(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", help="Checkpoint directory")],
    n: Annotated[int, typer.Option("--n", min=0, help="Number of samples")] = 16,
    temperature: Annotated[float, typer.Option("--temperature", "-t", help="Prior std scale")] = 1.0,
    out: OutOpt = None,
    seed: SeedOpt = None,
):
    """Dump samples from a checkpoint as NFTN (plus a PGM/PPM grid for images)."""
    try:
        seed = get_settings().DEFAULT_SEED if seed is None else seed
        written = dump_samples(checkpoint, n, temperature, out or checkpoint / "samples", seed)
    except (NanoFlowError, OSError) as exc:
        _fail(exc)
    if not written:
        console.print("[dim]no samples requested[/dim]")
    for path in written:
        console.print(f"[bold green]wrote[/bold green] {path}")


@app.command()
def ledger(config: ConfigOpt = None, model: Annotated[bool, typer.Option("--model", help="Config is a bare ModelConfig")] = False):
    """Print the parameter ledger of every model a spec would build."""
    try:
        if model and config is not None:
            configs = [ModelConfig.model_validate_json(config.read_text())]
        else:
            configs = [c.model for c in resolve_combinations(_load_spec(config, None))]
        ledgers = [(c, count_parameters(build_model(c))) for c in configs]
    except (NanoFlowError, ValidationError, OSError) as exc:
        _fail(exc)

    table = Table(title="[bold cyan]Parameter ledger[/bold cyan]", box=box.ROUNDED, header_style="bold magenta")
    for col in ("scheme", "K", "G", "trunk", "heads", "embeddings", "injection", "flow layers", "total"):
        table.add_column(col, justify="right")
    for c, led in ledgers:
        table.add_row(
            c.scheme, str(c.flows), str(c.groups),
            *(f"{v:,}" for v in (led.trunk, led.heads, led.embeddings, led.injection, led.flow_layers, led.total)),
        )
    console.print(table)


if __name__ == "__main__":
    app()
