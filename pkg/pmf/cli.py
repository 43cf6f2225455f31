"""Command-line interface of the polymorphic metaheuristic framework.

``run`` executes one adaptive run, ``baseline`` one fixed-algorithm run,
``bench`` the full strategies x functions x seeds matrix and ``report``
regenerates tables and plots from stored results.
"""

import dataclasses
import logging
import pathlib
import sys
from typing import Annotated
from typing import Optional

import typer

from pmf.benchmarks import ProblemDescriptor
from pmf.config import OUTPUT_ENV
from pmf.config import default_config
from pmf.config import load_config
from pmf.core import PmfError
from pmf.metaheuristics import AlgorithmId
from pmf.orchestrator import Cell
from pmf.orchestrator import ExperimentConfig
from pmf.orchestrator import ExperimentSummary
from pmf.orchestrator import PartialFailureError
from pmf.orchestrator import RunConfig
from pmf.orchestrator import RunResult
from pmf.orchestrator import SelectorKind
from pmf.orchestrator import run_baseline
from pmf.orchestrator import run_experiment
from pmf.orchestrator import run_pmf
from pmf.orchestrator import summarize
from pmf.reporting import SWITCHES_FILE
from pmf.reporting import load_results
from pmf.reporting import render_plots
from pmf.reporting import render_run_svg
from pmf.reporting import write_experiment
from pmf.reporting import write_run
from pmf.reporting import write_summary
from pmf.reporting import write_switch_table

app = typer.Typer(no_args_is_help=True)

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT = pathlib.Path("out")

config_option = typer.Option(
    "--config",
    "-c",
    help="TOML or JSON config file",
    exists=True,
    dir_okay=False,
)
function_option = typer.Option("--function", help="Benchmark function name")
dim_option = typer.Option("--dim", help="Number of decision variables", min=1)
seed_option = typer.Option("--seed", help="Run seed", min=0)
max_evals_option = typer.Option("--max-evals", help="Evaluation budget", min=1)
epoch_evals_option = typer.Option("--epoch-evals", help="Evaluations per epoch", min=1)
population_option = typer.Option("--population-size", help="Population size N", min=1)
initial_option = typer.Option("--initial", help="First algorithm of a PMF run")
selector_option = typer.Option("--selector", help="rule_based or external")
out_option = typer.Option("--out", "-o", help="Output directory")
verbose_option = typer.Option(
    "--verbose",
    "-v",
    count=True,
    help="Repeat for more log output",
)


def configure_logging(verbose: int) -> None:
    """WARNING by default, INFO with ``-v``, DEBUG with ``-vv``."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        force=True,
    )


def fail(error: PmfError) -> typer.Exit:
    """Show ``error`` in red on standard error and build the matching exit."""
    typer.secho(error.message, fg="red", err=True)
    return typer.Exit(code=error.exit_code)


def load(config: pathlib.Path | None) -> ExperimentConfig:
    """The config file if given, else defaults plus environment."""
    return load_config(config) if config is not None else default_config()


def override(  # noqa: PLR0913
    template: RunConfig,
    *,
    function: str | None = None,
    dim: int | None = None,
    seed: int | None = None,
    max_evals: int | None = None,
    epoch_evals: int | None = None,
    population_size: int | None = None,
    initial: str | None = None,
    selector: str | None = None,
    out: pathlib.Path | None = None,
) -> RunConfig:
    """Apply command-line values on top of the loaded run config."""
    problem = template.problem
    if function is not None or dim is not None:
        problem = ProblemDescriptor(
            function=problem.function if function is None else function,
            dim=problem.dim if dim is None else dim,
            seed=problem.seed,
            bias=problem.bias if function is None else None,
        )
    flags = {
        "seed": seed,
        "max_evals": max_evals,
        "epoch_evals": epoch_evals,
        "population_size": population_size,
        "initial_algorithm": None if initial is None else AlgorithmId(initial.upper()),
        "selector": None if selector is None else SelectorKind(selector),
        "output_dir": out,
    }
    changes = {key: value for key, value in flags.items() if value is not None}
    return dataclasses.replace(template, problem=problem, **changes)


def emit(result: RunResult, directory: pathlib.Path) -> None:
    """Write the run files and print a one-line summary."""
    write_run(result, directory)
    typer.echo(
        f"{result.run_id}: best {result.best.fitness:.10g} after "
        f"{result.total_evals} evaluations, {len(result.switches)} switch(es) "
        f"-> {directory}",
    )


@app.command()
def run(  # noqa: PLR0913
    config: Annotated[Optional[pathlib.Path], config_option] = None,  # noqa: UP007
    function: Annotated[Optional[str], function_option] = None,  # noqa: UP007
    dim: Annotated[Optional[int], dim_option] = None,  # noqa: UP007
    seed: Annotated[Optional[int], seed_option] = None,  # noqa: UP007
    max_evals: Annotated[Optional[int], max_evals_option] = None,  # noqa: UP007
    epoch_evals: Annotated[Optional[int], epoch_evals_option] = None,  # noqa: UP007
    population_size: Annotated[Optional[int], population_option] = None,  # noqa: UP007
    initial: Annotated[Optional[str], initial_option] = None,  # noqa: UP007
    selector: Annotated[Optional[str], selector_option] = None,  # noqa: UP007
    out: Annotated[Optional[pathlib.Path], out_option] = None,  # noqa: UP007
    verbose: Annotated[int, verbose_option] = 0,
) -> None:
    """Run the adaptive framework once."""
    configure_logging(verbose)
    try:
        template = load(config).template
        run_config = override(
            template,
            function=function,
            dim=dim,
            seed=seed,
            max_evals=max_evals,
            epoch_evals=epoch_evals,
            population_size=population_size,
            initial=initial,
            selector=selector,
            out=out or template.output_dir or DEFAULT_OUTPUT,
        )
        result = run_pmf(run_config, run_config.problem.build())
        emit(result, run_config.output_dir or DEFAULT_OUTPUT)
    except (PmfError, ValueError) as error:
        raise fail(error if isinstance(error, PmfError) else PmfError(str(error))) from error


@app.command()
def baseline(  # noqa: PLR0913
    algorithm: Annotated[str, typer.Argument(help="GA, PSO, DE, ACO, SA, TS or CMAES")],
    config: Annotated[Optional[pathlib.Path], config_option] = None,  # noqa: UP007
    function: Annotated[Optional[str], function_option] = None,  # noqa: UP007
    dim: Annotated[Optional[int], dim_option] = None,  # noqa: UP007
    seed: Annotated[Optional[int], seed_option] = None,  # noqa: UP007
    max_evals: Annotated[Optional[int], max_evals_option] = None,  # noqa: UP007
    epoch_evals: Annotated[Optional[int], epoch_evals_option] = None,  # noqa: UP007
    population_size: Annotated[Optional[int], population_option] = None,  # noqa: UP007
    out: Annotated[Optional[pathlib.Path], out_option] = None,  # noqa: UP007
    verbose: Annotated[int, verbose_option] = 0,
) -> None:
    """Run one algorithm for the whole budget."""
    configure_logging(verbose)
    try:
        template = load(config).template
        run_config = override(
            template,
            function=function,
            dim=dim,
            seed=seed,
            max_evals=max_evals,
            epoch_evals=epoch_evals,
            population_size=population_size,
            out=out or template.output_dir or DEFAULT_OUTPUT,
        )
        fixed = AlgorithmId(algorithm.upper())
        result = run_baseline(fixed, run_config, run_config.problem.build())
        emit(result, run_config.output_dir or DEFAULT_OUTPUT)
    except (PmfError, ValueError) as error:
        raise fail(error if isinstance(error, PmfError) else PmfError(str(error))) from error


@app.command()
def bench(
    config: Annotated[Optional[pathlib.Path], config_option] = None,  # noqa: UP007
    out: Annotated[Optional[pathlib.Path], out_option] = None,  # noqa: UP007
    workers: Annotated[Optional[int], typer.Option("--workers", "-j", min=1)] = None,  # noqa: UP007
    plot: Annotated[Optional[bool], typer.Option("--plot/--no-plot")] = None,  # noqa: UP007
    verbose: Annotated[int, verbose_option] = 0,
) -> None:
    """Run every strategy on every function for every seed."""
    configure_logging(verbose)
    try:
        experiment = load(config)
        changes = {"output_dir": out, "workers": workers, "plot": plot}
        experiment = dataclasses.replace(
            experiment,
            **{key: value for key, value in changes.items() if value is not None},
        )
        summary = run_experiment(experiment)
        write_experiment(summary, experiment)
        typer.echo(
            f"{len(summary.results)} run(s) written to {experiment.output_dir}",
        )
        if summary.failures:
            failed = ", ".join(cell.run_id for cell in summary.failures)
            message = f"{len(summary.failures)} run(s) failed: {failed}"
            raise PartialFailureError(message)
    except PmfError as error:
        raise fail(error) from error


def _rebuild_summary(results: list[RunResult]) -> ExperimentSummary:
    by_cell = {Cell(r.strategy, r.function, r.seed): r for r in results}
    strategies = list(dict.fromkeys(r.strategy for r in results))
    functions = list(dict.fromkeys(r.function for r in results))
    return ExperimentSummary(by_cell, {}, summarize(by_cell, strategies, functions))


@app.command()
def report(
    directory: Annotated[
        pathlib.Path,
        typer.Argument(help="Directory holding stored results", envvar=OUTPUT_ENV),
    ] = DEFAULT_OUTPUT,
    run_id: Annotated[
        Optional[str],  # noqa: UP007
        typer.Option("--run", help="Plot only this run, e.g. PMF/sphere/seed-0"),
    ] = None,
    verbose: Annotated[int, verbose_option] = 0,
) -> None:
    """Regenerate tables and plots from stored results."""
    configure_logging(verbose)
    try:
        results = load_results(directory)
        if run_id is not None:
            matches = [r for r in results if r.run_id == run_id]
            if not matches:
                message = f"No stored run '{run_id}' under '{directory}'."
                raise PmfError(message)
            path = directory / run_id / "trajectory.svg"
            render_run_svg(matches[0], path)
            typer.echo(str(path))
            return
        write_switch_table(results, directory / SWITCHES_FILE)
        write_summary(_rebuild_summary(results), directory)
        for path in render_plots(results, directory):
            typer.echo(str(path))
    except PmfError as error:
        raise fail(error) from error


def main(argv: list[str] | None = None) -> int:
    """Console entry point; returns the process exit code.

    Parser errors (unknown flags, bad values) exit with 1.
    """
    args = sys.argv[1:] if argv is None else argv
    try:
        outcome = app(args=args, prog_name="pmf", standalone_mode=False)
    except typer.Abort:
        typer.secho("Aborted.", fg="red", err=True)
        return 1
    except Exception as error:
        show = getattr(error, "show", None)
        if not callable(show):
            raise
        show()
        return 1
    return outcome if isinstance(outcome, int) else 0


if __name__ == "__main__":
    sys.exit(main())
