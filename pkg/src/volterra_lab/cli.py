"""Typer entry point: ``volterra-lab <command> --config run.json --out results/``.

Exit codes: 0 all checks passed, 1 a check failed, 2 the configuration was rejected.
"""

import logging
from pathlib import Path
from typing import Any, Dict, Optional

import typer
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from volterra_lab import __version__
from volterra_lab.commands import COMMANDS, EXIT_CODES, ResponseDict, run_command
from volterra_lab.config import ConfigError, RunConfig, load_config
from volterra_lab.observability import setup_console_logging, setup_flagged_path_logging

logger: logging.Logger = logging.getLogger(__name__)

app = typer.Typer(
    name="volterra-lab",
    help="Splitting-scheme simulation and verification for stochastic Volterra equations with jumps.",
    no_args_is_help=True,
    add_completion=False,
)
console = Console()

STATUS_STYLE: Dict[str, str] = {"success": "green", "failure": "yellow", "error": "red"}

ConfigOption = typer.Option(None, "--config", "-c", help="JSON run document (defaults to the desk configuration).")
SeedOption = typer.Option(None, "--seed", min=0, help="Master seed, overrides the document.")
ThreadsOption = typer.Option(None, "--threads", min=1, help="Worker threads (default: available cores).")
OutOption = typer.Option(Path("results"), "--out", "-o", help="Directory for the artifacts.")


def _version_callback(value: bool) -> None:
    if value:
        console.print(f"volterra-lab {__version__}")
        raise typer.Exit()


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(None, "--log-level", help="Console log level (env VOLTERRA_LOG_LEVEL)."),
    flag_log: Optional[Path] = typer.Option(None, "--flag-log", help="File receiving one line per flagged path."),
    version: bool = typer.Option(False, "--version", callback=_version_callback, is_eager=True),
) -> None:
    setup_console_logging(log_level)
    setup_flagged_path_logging(str(flag_log) if flag_log is not None else None)


def _scalar(value: Any) -> bool:
    return value is None or isinstance(value, (str, int, float, bool))


def _format(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, dict) and "value" in value and "unit" in value:
        return _format(value["value"])
    return str(value)


def render_response(name: str, response: ResponseDict) -> None:
    status = response["status"]
    console.print(Panel(response["message"], title=f"{name}: {status}", border_style=STATUS_STYLE.get(status, "white")))
    data = response.get("data") or {}
    rows = data.get("table")
    if isinstance(rows, list) and rows:
        table = Table(title="Coupled sup-L1 distances")
        columns = ["N", "xi_xhat", "xhat_xbar", "xi_xbar", "cauchy", "moment_xi", "moment_xhat", "flagged"]
        for column in columns:
            table.add_column(column, justify="right")
        for row in rows:
            table.add_row(*(_format(row.get(c)) for c in columns))
        console.print(table)
    summary = Table(show_header=False, box=None)
    for key, value in sorted(data.items()):
        if key == "table":
            continue
        if _scalar(value) or (isinstance(value, dict) and "unit" in value):
            summary.add_row(key, _format(value))
    if summary.row_count:
        console.print(summary)
    for artifact in response.get("artifacts", []):
        console.print(f"[dim]wrote {artifact}[/dim]")


def execute(name: str, config_path: Optional[Path], seed: Optional[int], threads: Optional[int], out: Path) -> int:
    """Load the document, apply flag overrides, run ``name`` and return its exit code."""
    try:
        config: RunConfig = load_config(config_path).with_overrides(seed=seed, threads=threads)
    except ConfigError as e:
        console.print(Panel(str(e), title=f"{name}: config error", border_style="red"))
        return EXIT_CODES["error"]
    response = run_command(name, COMMANDS[name], config, out)
    render_response(name, response)
    return EXIT_CODES[response["status"]]


@app.command("kernel-check")
def kernel_check(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Path = OutOption,
) -> None:
    """Complete-monotonicity scan and non-negativity counterexample search."""
    raise typer.Exit(execute("kernel-check", config, seed, threads, out))


@app.command("simulate")
def simulate(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Path = OutOption,
) -> None:
    """Run the splitting scheme and dump paths plus a positivity summary."""
    raise typer.Exit(execute("simulate", config, seed, threads, out))


@app.command("converge")
def converge(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Path = OutOption,
) -> None:
    """Coupled convergence table over grid.N_list and the Yamada-Watanabe suite."""
    raise typer.Exit(execute("converge", config, seed, threads, out))


@app.command("laplace")
def laplace(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Path = OutOption,
) -> None:
    """Semi-explicit Laplace transform with a Monte Carlo cross-check."""
    raise typer.Exit(execute("laplace", config, seed, threads, out))


@app.command("stable-test")
def stable_test(
    config: Optional[Path] = ConfigOption,
    seed: Optional[int] = SeedOption,
    threads: Optional[int] = ThreadsOption,
    out: Path = OutOption,
) -> None:
    """Statistical checks of the alpha-stable driver."""
    raise typer.Exit(execute("stable-test", config, seed, threads, out))


if __name__ == "__main__":
    app()
