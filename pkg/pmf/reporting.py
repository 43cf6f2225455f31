"""Run artifacts on disk: CSV tables, JSON results, feedback streams and SVG plots."""

import csv
import json
import logging
from collections.abc import Iterable
from collections.abc import Mapping
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from pmf.core import PmfError  # noqa: E402
from pmf.feedback import FeedbackReport  # noqa: E402
from pmf.orchestrator import ExperimentConfig  # noqa: E402
from pmf.orchestrator import ExperimentSummary  # noqa: E402
from pmf.orchestrator import RunResult  # noqa: E402
from pmf.orchestrator import median_trajectory  # noqa: E402

logger = logging.getLogger(__name__)

RESULT_FILE = "result.json"
TRAJECTORY_FILE = "trajectory.csv"
FEEDBACK_FILE = "feedback.jsonl"
SWITCHES_FILE = "switches.csv"
SUMMARY_JSON = "summary.json"
SUMMARY_CSV = "summary.csv"

TRAJECTORY_HEADER = ("epoch", "algorithm", "best_so_far", "evals_used")
SWITCH_HEADER = ("run", "epoch", "algorithm", "switched")
SUMMARY_HEADER = (
    "strategy",
    "function",
    "runs",
    "median",
    "q1",
    "q3",
    "iqr",
    "rank",
    "switch_median",
    "switch_mean",
)


class ReportError(PmfError):
    """Stored results are missing, malformed or cannot be plotted."""


def _number(value: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    return format(value, ".17g")


def write_trajectory_csv(result: RunResult, path: Path) -> None:
    """Write ``epoch,algorithm,best_so_far,evals_used``, one row per epoch."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_HEADER)
        rows = zip(result.trajectory, result.algorithms, result.evals_used, strict=True)
        for epoch, (best, algorithm, used) in enumerate(rows):
            writer.writerow((epoch, str(algorithm), _number(best), used))


def read_trajectory_csv(path: Path) -> list[tuple[int, str, float, int]]:
    """Parse a file written by :func:`write_trajectory_csv`."""
    with path.open(encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != TRAJECTORY_HEADER:
            message = f"'{path}' is not a trajectory file."
            raise ReportError(message)
        return [(int(e), a, float(b), int(u)) for e, a, b, u in reader]


def switch_rows(results: Iterable[RunResult]) -> list[tuple[str, int, str, int]]:
    """Per-epoch algorithm matrix with a 0/1 flag on each switch epoch."""
    rows = []
    for result in results:
        switched = {event.epoch for event in result.switches}
        rows.extend(
            (result.run_id, epoch, str(algorithm), int(epoch in switched))
            for epoch, algorithm in enumerate(result.algorithms)
        )
    return rows


def write_switch_table(results: Iterable[RunResult], path: Path) -> None:
    """Write ``run,epoch,algorithm,switched`` for every run."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWITCH_HEADER)
        writer.writerows(switch_rows(results))


def write_feedback(result: RunResult, path: Path) -> None:
    """One JSON report per line."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        f.writelines(report.to_json() + "\n" for report in result.history.reports)


def _dump(data: Any, path: Path) -> None:  # noqa: ANN401
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")


def write_run(result: RunResult, directory: Path) -> None:
    """Write all per-run files into ``directory``."""
    _dump(result.to_dict(), directory / RESULT_FILE)
    write_trajectory_csv(result, directory / TRAJECTORY_FILE)
    write_feedback(result, directory / FEEDBACK_FILE)
    write_switch_table([result], directory / SWITCHES_FILE)


def load_run(directory: Path) -> RunResult:
    """Read a run written by :func:`write_run`."""
    result_path = directory / RESULT_FILE
    try:
        data = json.loads(result_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as error:
        message = f"Cannot read run result '{result_path}': {error}"
        raise ReportError(message) from error
    reports: list[FeedbackReport] = []
    feedback_path = directory / FEEDBACK_FILE
    if feedback_path.exists():
        with feedback_path.open(encoding="utf-8") as f:
            reports = [FeedbackReport.from_dict(json.loads(line)) for line in f if line.strip()]
    try:
        return RunResult.from_dict(data, reports)
    except (KeyError, ValueError, TypeError) as error:
        message = f"Malformed run result '{result_path}': {error}"
        raise ReportError(message) from error


def load_results(root: Path) -> list[RunResult]:
    """Every run stored below ``root``, in path order."""
    paths = sorted(root.glob(f"**/{RESULT_FILE}"))
    if not paths:
        message = f"No run results found under '{root}'."
        raise ReportError(message)
    return [load_run(path.parent) for path in paths]


def write_summary(summary: ExperimentSummary, directory: Path) -> None:
    """``summary.json`` with every statistic and ``summary.csv`` with the headline ones."""
    _dump(summary.to_dict(), directory / SUMMARY_JSON)
    with (directory / SUMMARY_CSV).open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SUMMARY_HEADER)
        for group in summary.groups:
            writer.writerow(
                (
                    group.strategy,
                    group.function,
                    len(group.finals),
                    _number(group.median),
                    _number(group.q1),
                    _number(group.q3),
                    _number(group.iqr),
                    group.rank,
                    _number(group.switch_median),
                    _number(group.switch_mean),
                ),
            )


def convergence_figure(
    trajectories: Mapping[str, Sequence[Sequence[float]]],
    title: str = "",
) -> Figure:
    """One median best-so-far line per strategy."""
    curves = {name: median_trajectory(runs) for name, runs in trajectories.items() if runs}
    if not curves:
        message = "Nothing to plot: no trajectories given."
        raise ReportError(message)
    figure, axes = plt.subplots(figsize=(8, 5))
    for name, curve in curves.items():
        axes.plot(range(len(curve)), curve, label=name, linewidth=1.5)
    if all(v > 0 for curve in curves.values() for v in curve):
        axes.set_yscale("log")
    axes.set_xlabel("Epoch")
    axes.set_ylabel("Best fitness so far (median)")
    if title:
        axes.set_title(title)
    axes.grid(visible=True, alpha=0.3)
    axes.legend(loc="upper right")
    figure.tight_layout()
    return figure


def _save_svg(figure: Figure, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with mpl.rc_context({"svg.hashsalt": "pmf", "svg.fonttype": "none"}):
        figure.savefig(path, format="svg", metadata={"Date": None})
    plt.close(figure)


def render_convergence_svg(
    trajectories: Mapping[str, Sequence[Sequence[float]]],
    path: Path,
    title: str = "",
) -> None:
    """Save :func:`convergence_figure` as a self-contained SVG."""
    _save_svg(convergence_figure(trajectories, title), path)


def run_figure(result: RunResult) -> Figure:
    """Best-so-far of one run with its switch epochs marked."""
    if not result.trajectory:
        message = f"Run {result.run_id} has no epochs."
        raise ReportError(message)
    figure, axes = plt.subplots(figsize=(8, 5))
    axes.plot(range(len(result.trajectory)), result.trajectory, label=result.strategy)
    for event in result.switches:
        axes.axvline(event.epoch, color="grey", linestyle="--", linewidth=0.8)
        axes.annotate(
            str(event.to_algorithm),
            (event.epoch, 1.0),
            xycoords=("data", "axes fraction"),
            rotation=90,
            va="top",
            fontsize=7,
        )
    if all(v > 0 for v in result.trajectory):
        axes.set_yscale("log")
    axes.set_xlabel("Epoch")
    axes.set_ylabel("Best fitness so far")
    axes.set_title(result.run_id)
    figure.tight_layout()
    return figure


def render_run_svg(result: RunResult, path: Path) -> None:
    """Save :func:`run_figure` as SVG."""
    _save_svg(run_figure(result), path)


def group_trajectories(
    results: Iterable[RunResult],
) -> dict[str, dict[str, list[list[float]]]]:
    """``function -> strategy -> trajectories`` in first-seen order."""
    grouped: dict[str, dict[str, list[list[float]]]] = {}
    for result in results:
        by_strategy = grouped.setdefault(result.function, {})
        by_strategy.setdefault(result.strategy, []).append(result.trajectory)
    return grouped


def render_plots(results: Sequence[RunResult], directory: Path) -> list[Path]:
    """One ``convergence-<function>.svg`` per function."""
    written = []
    for function, by_strategy in group_trajectories(results).items():
        path = directory / f"convergence-{function}.svg"
        render_convergence_svg(by_strategy, path, title=function)
        written.append(path)
    return written


def write_experiment(summary: ExperimentSummary, experiment: ExperimentConfig) -> None:
    """Write every run, the switch table, the summary and the plots."""
    root = experiment.output_dir
    for cell, result in summary.results.items():
        write_run(result, root / cell.run_id)
    results = list(summary.results.values())
    write_switch_table(results, root / SWITCHES_FILE)
    write_summary(summary, root)
    if experiment.plot and results:
        render_plots(results, root)
    logger.info("Wrote %d runs to %s", len(results), root)
