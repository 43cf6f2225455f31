"""Per-epoch performance indicators and the run history the selector reads."""

import json
import logging
from collections.abc import Mapping
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from typing import TYPE_CHECKING
from typing import Any
from typing import Self

import numpy as np

from pmf.core import EvaluationBudget
from pmf.core import PmfError
from pmf.core import Population
from pmf.core import SearchSpace
from pmf.metaheuristics import AlgorithmId
from pmf.metaheuristics import EpochStats

if TYPE_CHECKING:
    from pmf.orchestrator import SwitchEvent

logger = logging.getLogger(__name__)

IMPROVEMENT_EPSILON = 1e-8
CONVERGENCE_WINDOW = 5
_DENOMINATOR_FLOOR = 1e-12


class NonMonotonicEpochError(PmfError):
    """A report was recorded out of epoch order."""


@dataclass(frozen=True)
class FeedbackReport:
    """Indicators for one finished epoch."""

    epoch: int
    algorithm: AlgorithmId
    best_fitness: float
    mean_fitness: float
    improvement_rate: float
    convergence_rate: float
    stagnation_count: int
    diversity: float
    evals_used_total: int
    budget_fraction: float
    epoch_wall_time: float

    def to_dict(self: Self) -> dict[str, Any]:
        """Plain JSON types, field names unchanged."""
        data = asdict(self)
        data["algorithm"] = str(self.algorithm)
        return data

    def to_json(self: Self) -> str:
        """One line of the feedback stream."""
        return json.dumps(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls: type[Self], data: Mapping[str, Any]) -> Self:
        """Rebuild a report from :meth:`to_dict` output."""
        return cls(
            epoch=int(data["epoch"]),
            algorithm=AlgorithmId(data["algorithm"]),
            best_fitness=float(data["best_fitness"]),
            mean_fitness=float(data["mean_fitness"]),
            improvement_rate=float(data["improvement_rate"]),
            convergence_rate=float(data["convergence_rate"]),
            stagnation_count=int(data["stagnation_count"]),
            diversity=float(data["diversity"]),
            evals_used_total=int(data["evals_used_total"]),
            budget_fraction=float(data["budget_fraction"]),
            epoch_wall_time=float(data["epoch_wall_time"]),
        )


@dataclass
class HistoryLog:
    """Everything the run has reported so far, plus its switch events."""

    reports: list[FeedbackReport] = field(default_factory=list)
    switches: list["SwitchEvent"] = field(default_factory=list)
    cumulative_improvement: dict[AlgorithmId, float] = field(default_factory=dict)
    wall_time: dict[AlgorithmId, float] = field(default_factory=dict)
    epochs: dict[AlgorithmId, int] = field(default_factory=dict)

    @property
    def last(self: Self) -> FeedbackReport | None:
        """The most recent report, if any."""
        return self.reports[-1] if self.reports else None

    def mean_wall_time(self: Self, algorithm: AlgorithmId) -> float | None:
        """Average seconds per epoch for ``algorithm``; ``None`` if it never ran."""
        count = self.epochs.get(algorithm, 0)
        if count == 0:
            return None
        return self.wall_time[algorithm] / count


def diversity(pop: Population, space: SearchSpace) -> float:
    """Mean pairwise Euclidean distance over the box diagonal, clipped to ``[0, 1]``."""
    if len(pop) == 0:
        message = "Diversity is undefined for an empty population."
        raise PmfError(message)
    if len(pop) == 1:
        return 0.0
    positions = pop.positions()
    deltas = positions[:, None, :] - positions[None, :, :]
    distances = np.sqrt(np.sum(deltas**2, axis=-1))
    n = len(pop)
    mean_distance = float(np.sum(np.triu(distances, k=1))) / (n * (n - 1) / 2)
    return min(1.0, max(0.0, mean_distance / space.diagonal))


def compute_report(  # noqa: PLR0913
    log: HistoryLog,
    best_so_far_before: float,
    stats: EpochStats,
    pop: Population,
    space: SearchSpace,
    budget: EvaluationBudget,
    wall: float,
    *,
    algorithm: AlgorithmId,
) -> FeedbackReport:
    """Build the report for the epoch that produced ``stats``.

    Args:
    ----
        log (HistoryLog): History so far; its last report is the previous epoch.
        best_so_far_before (float): Best fitness of the run before this epoch.
        stats (EpochStats): What the epoch did.
        pop (Population): The population after the epoch.
        space (SearchSpace): Box used to normalize diversity.
        budget (EvaluationBudget): The run budget.
        wall (float): Seconds the epoch took.
        algorithm (AlgorithmId): The algorithm that ran the epoch.

    Returns:
    -------
        FeedbackReport: The indicators, not yet recorded in ``log``.

    """
    prev = log.last
    best_after = min(best_so_far_before, stats.best_fitness)
    gain = best_so_far_before - best_after
    denominator = max(abs(best_so_far_before), _DENOMINATOR_FLOOR)
    improvement = max(0.0, gain / denominator)
    if improvement > IMPROVEMENT_EPSILON:
        stagnation = 0
    else:
        stagnation = (prev.stagnation_count if prev else 0) + 1
    window = [r.improvement_rate for r in log.reports[-(CONVERGENCE_WINDOW - 1) :]]
    window.append(improvement)
    return FeedbackReport(
        epoch=prev.epoch + 1 if prev else 0,
        algorithm=algorithm,
        best_fitness=best_after,
        mean_fitness=stats.mean_fitness,
        improvement_rate=improvement,
        convergence_rate=float(np.mean(window)),
        stagnation_count=stagnation,
        diversity=diversity(pop, space),
        evals_used_total=budget.used,
        budget_fraction=budget.fraction,
        epoch_wall_time=wall,
    )


def record(log: HistoryLog, report: FeedbackReport) -> HistoryLog:
    """Append ``report`` and update the per-algorithm running totals."""
    expected = log.last.epoch + 1 if log.last else 0
    if report.epoch != expected:
        message = f"Expected a report for epoch {expected}, got epoch {report.epoch}."
        raise NonMonotonicEpochError(message)
    log.reports.append(report)
    algorithm = report.algorithm
    log.cumulative_improvement[algorithm] = (
        log.cumulative_improvement.get(algorithm, 0.0) + report.improvement_rate
    )
    log.wall_time[algorithm] = log.wall_time.get(algorithm, 0.0) + report.epoch_wall_time
    log.epochs[algorithm] = log.epochs.get(algorithm, 0) + 1
    logger.debug("Epoch report %s", report.to_json())
    return log
