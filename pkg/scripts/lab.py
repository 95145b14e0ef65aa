import logging
import typer

from pathlib import Path
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table
from typing import Optional

from core.config import load_config, with_overrides
from core.errors import ConfigurationError
from core.harness import EXIT_CONFIGURATION, CommandResult, execute

# Usage: python -m scripts.lab <command> --config configs/<file>.yaml [--out DIR] [--seed N] [--threads N]

app = typer.Typer(help="Passport option and degenerate parabolic PDE lab.", no_args_is_help=True)
console = Console(stderr=True)
logger = logging.getLogger("scripts.lab")

ConfigOption = typer.Option(..., "--config", "-c", exists=True, dir_okay=False, help="Run configuration (YAML).")
OutOption = typer.Option(None, "--out", help="Output directory; overrides the config and PASSPORT_LAB_OUT.")
SeedOption = typer.Option(None, "--seed", min=0, help="Seed override.")
ThreadsOption = typer.Option(None, "--threads", min=1, help="Monte Carlo worker processes.")
VerboseOption = typer.Option(False, "--verbose", "-v", help="Debug logging.")


def setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, rich_tracebacks=True, show_path=False)],
        force=True,
    )


def print_result(result: CommandResult):
    if result.checks:
        table = Table(title="Checks")
        for column in ("check", "observed", "tolerance", "result", "note"):
            table.add_column(column)
        for check in result.checks:
            table.add_row(check.name, f"{check.observed:.4g}", f"{check.tolerance:.1e}",
                          "[green]PASS[/green]" if check.passed else "[red]FAIL[/red]", check.note)
        console.print(table)
    for key, value in result.summary.items():
        console.print(f"[bold]{key}[/bold]: {value}")
    for path in result.artifacts:
        console.print(f"  wrote {path}")


def run(command: str, config: Path, out: Optional[Path], seed: Optional[int], threads: Optional[int],
        verbose: bool):
    setup_logging(verbose)
    try:
        cfg = load_config(config)
        if cfg.command != command:
            raise ConfigurationError(f"{config} configures '{cfg.command}', not '{command}'.")
    except ConfigurationError as e:
        logger.error("%s", e)
        raise typer.Exit(code=EXIT_CONFIGURATION)

    cfg = with_overrides(cfg, seed=seed, threads=threads, out=str(out) if out is not None else None)
    result = execute(cfg)
    print_result(result)
    raise typer.Exit(code=result.exit_code)


@app.command("price-passport")
def price_passport(config: Path = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption,
                   threads: Optional[int] = ThreadsOption, verbose: bool = VerboseOption):
    """Classical passport value surface and policy map from the HJB equation."""
    run("price-passport", config, out, seed, threads, verbose)


@app.command("price-symmetric")
def price_symmetric(config: Path = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption,
                    threads: Optional[int] = ThreadsOption, verbose: bool = VerboseOption):
    """Symmetric passport: PDE value, stop-loss Monte Carlo and policy agreement."""
    run("price-symmetric", config, out, seed, threads, verbose)


@app.command("verify")
def verify(config: Path = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption,
           threads: Optional[int] = ThreadsOption, verbose: bool = VerboseOption):
    """Runs one verification suite: comparison, convexity, hormander, adjoint-identity or greens."""
    run("verify", config, out, seed, threads, verbose)


@app.command("transform")
def transform(config: Path = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption,
              threads: Optional[int] = ThreadsOption, verbose: bool = VerboseOption):
    """Moves a payoff or a stored surface between x and s = exp(x) coordinates."""
    run("transform", config, out, seed, threads, verbose)


@app.command("simulate")
def simulate(config: Path = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption,
             threads: Optional[int] = ThreadsOption, verbose: bool = VerboseOption):
    """Monte Carlo paths of prices, index-numeraire states, accounts or portfolios."""
    run("simulate", config, out, seed, threads, verbose)


if __name__ == "__main__":
    # Required for multiprocessing on platforms that spawn workers.
    app()
