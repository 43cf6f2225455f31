"""The adaptive control loop, fixed-algorithm baselines and the experiment matrix."""

import enum
import logging
import time
from collections import Counter
from collections.abc import Mapping
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from pathlib import Path
from typing import Any
from typing import Self

import numpy as np

from pmf.benchmarks import ProblemDescriptor
from pmf.core import ConfigInvalidError
from pmf.core import EvaluationBudget
from pmf.core import Individual
from pmf.core import Objective
from pmf.core import PmfError
from pmf.core import RandomStream
from pmf.core import best_of
from pmf.core import evaluate_members
from pmf.core import random_population
from pmf.feedback import FeedbackReport
from pmf.feedback import HistoryLog
from pmf.feedback import compute_report
from pmf.feedback import record
from pmf.handover import HandoverConfig
from pmf.handover import handover
from pmf.metaheuristics import AlgorithmId
from pmf.metaheuristics import AlgorithmParams
from pmf.metaheuristics import AlgorithmState
from pmf.metaheuristics import init
from pmf.metaheuristics import inject_population
from pmf.metaheuristics import params_from_mapping
from pmf.metaheuristics import params_to_dict
from pmf.metaheuristics import step_epoch
from pmf.selector import Action
from pmf.selector import ContinueSelector
from pmf.selector import ExternalSelector
from pmf.selector import ExternalSelectorConfig
from pmf.selector import RuleBasedSelector
from pmf.selector import Selector
from pmf.selector import SelectorPolicy

logger = logging.getLogger(__name__)

PMF_STRATEGY = "PMF"
STRATEGIES: tuple[str, ...] = (PMF_STRATEGY, *(str(a) for a in AlgorithmId))
MIN_POPULATION = 4
TRACE_FILE = "selector_trace.jsonl"


class PartialFailureError(PmfError):
    """Some experiment cells failed; the others completed."""

    def __init__(self: Self, message: str, exit_code: int = 2) -> None:
        """Initialize with exit code 2."""
        super().__init__(message, exit_code)


class SelectorKind(enum.StrEnum):
    """Which selector drives a PMF run."""

    RULE_BASED = "rule_based"
    EXTERNAL = "external"


@dataclass(frozen=True)
class RunConfig:
    """Tunables of one run."""

    problem: ProblemDescriptor = field(default_factory=ProblemDescriptor)
    population_size: int = 30
    max_evals: int = 10000
    epoch_evals: int = 300
    initial_algorithm: AlgorithmId = AlgorithmId.DE
    selector: SelectorKind = SelectorKind.RULE_BASED
    policy: SelectorPolicy = field(default_factory=SelectorPolicy)
    external: ExternalSelectorConfig | None = None
    handover: HandoverConfig = field(default_factory=HandoverConfig)
    seed: int = 0
    output_dir: Path | None = None
    params: Mapping[AlgorithmId, Mapping[str, Any]] = field(default_factory=dict)

    def __post_init__(self: Self) -> None:
        """Validate sizes and budgets."""
        if self.population_size < MIN_POPULATION:
            message = (
                f"run.population_size must be at least {MIN_POPULATION}, "
                f"got {self.population_size}."
            )
            raise ConfigInvalidError(message)
        if self.epoch_evals <= self.population_size:
            message = (
                f"run.epoch_evals ({self.epoch_evals}) must exceed "
                f"run.population_size ({self.population_size})."
            )
            raise ConfigInvalidError(message)
        if self.epoch_evals > self.max_evals:
            message = (
                f"run.epoch_evals ({self.epoch_evals}) must not exceed "
                f"run.max_evals ({self.max_evals})."
            )
            raise ConfigInvalidError(message)
        if self.selector is SelectorKind.EXTERNAL and self.external is None:
            message = "selector.kind 'external' needs selector.endpoint_url."
            raise ConfigInvalidError(message)
        if self.seed < 0:
            message = f"run.seed must be non-negative, got {self.seed}."
            raise ConfigInvalidError(message)

    def algorithm_params(self: Self, algorithm: AlgorithmId) -> AlgorithmParams:
        """Defaults for ``algorithm`` with the configured overrides applied."""
        return params_from_mapping(
            algorithm,
            self.problem.dim,
            self.population_size,
            self.params.get(algorithm, {}),
        )

    def to_dict(self: Self) -> dict[str, Any]:
        """Serialize everything needed to replay the run (never the API key)."""
        data: dict[str, Any] = {
            "problem": self.problem.to_dict(),
            "population_size": self.population_size,
            "max_evals": self.max_evals,
            "epoch_evals": self.epoch_evals,
            "initial_algorithm": str(self.initial_algorithm),
            "seed": self.seed,
            "selector": {
                "kind": str(self.selector),
                "stagnation_threshold": self.policy.stagnation_threshold,
                "diversity_low": self.policy.diversity_low,
                "diversity_high": self.policy.diversity_high,
                "phase_split": self.policy.phase_split,
                "exploratory_set": [str(a) for a in self.policy.exploratory_set],
                "exploitative_set": [str(a) for a in self.policy.exploitative_set],
                "cost_aware": self.policy.cost_aware,
                "late_convergence_switch": self.policy.late_convergence_switch,
            },
            "handover": {
                "elite_fraction": self.handover.elite_fraction,
                "restart_diversity_threshold": self.handover.restart_diversity_threshold,
                "reevaluate_on_switch": self.handover.reevaluate_on_switch,
                "hybrid_merge_enabled": self.handover.hybrid_merge_enabled,
                "donor_fraction": self.handover.donor_fraction,
            },
            "params": {
                str(a): params_to_dict(self.algorithm_params(a)) for a in AlgorithmId
            },
        }
        if self.external is not None:
            data["selector"] |= {
                "endpoint_url": self.external.endpoint_url,
                "model_name": self.external.model_name,
                "timeout": self.external.timeout,
                "max_retries": self.external.max_retries,
            }
        return data


@dataclass(frozen=True)
class SwitchEvent:
    """One algorithm change; ``epoch`` is the first epoch of the incoming algorithm."""

    epoch: int
    from_algorithm: AlgorithmId
    to_algorithm: AlgorithmId
    reason: str
    best_fitness_at_switch: float
    reevaluation_evals: int = 0

    def __post_init__(self: Self) -> None:
        """A switch must change the algorithm."""
        if self.from_algorithm == self.to_algorithm:
            message = f"Switch from {self.from_algorithm} to itself."
            raise PmfError(message)

    def to_dict(self: Self) -> dict[str, Any]:
        """Plain JSON types."""
        return {
            "epoch": self.epoch,
            "from": str(self.from_algorithm),
            "to": str(self.to_algorithm),
            "reason": self.reason,
            "best_fitness_at_switch": self.best_fitness_at_switch,
            "reevaluation_evals": self.reevaluation_evals,
        }

    @classmethod
    def from_dict(cls: type[Self], data: Mapping[str, Any]) -> Self:
        """Inverse of :meth:`to_dict`."""
        return cls(
            epoch=int(data["epoch"]),
            from_algorithm=AlgorithmId(data["from"]),
            to_algorithm=AlgorithmId(data["to"]),
            reason=str(data["reason"]),
            best_fitness_at_switch=float(data["best_fitness_at_switch"]),
            reevaluation_evals=int(data.get("reevaluation_evals", 0)),
        )


@dataclass
class RunResult:
    """Everything a finished run produced."""

    strategy: str
    function: str
    seed: int
    best: Individual
    history: HistoryLog
    switches: list[SwitchEvent]
    total_evals: int
    initial_evals: int
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def trajectory(self: Self) -> list[float]:
        """Best-so-far after every epoch."""
        return [report.best_fitness for report in self.history.reports]

    @property
    def algorithms(self: Self) -> list[AlgorithmId]:
        """Algorithm that ran each epoch."""
        return [report.algorithm for report in self.history.reports]

    @property
    def evals_used(self: Self) -> list[int]:
        """Cumulative evaluations after every epoch."""
        return [report.evals_used_total for report in self.history.reports]

    @property
    def run_id(self: Self) -> str:
        """``<strategy>/<function>/seed-<seed>``."""
        return f"{self.strategy}/{self.function}/seed-{self.seed}"

    def to_dict(self: Self) -> dict[str, Any]:
        """Deterministic serialization; wall times are left out."""
        return {
            "strategy": self.strategy,
            "function": self.function,
            "seed": self.seed,
            "best": {
                "position": self.best.position.tolist(),
                "fitness": self.best.fitness,
            },
            "total_evals": self.total_evals,
            "initial_evals": self.initial_evals,
            "trajectory": self.trajectory,
            "algorithms": [str(a) for a in self.algorithms],
            "evals_used": self.evals_used,
            "switches": [event.to_dict() for event in self.switches],
            "config": self.config,
        }

    @classmethod
    def from_dict(
        cls: type[Self],
        data: Mapping[str, Any],
        reports: Sequence[FeedbackReport] = (),
    ) -> Self:
        """Rebuild a result from ``result.json`` and, optionally, its feedback stream.

        Without ``reports`` the history is rebuilt from the stored
        trajectory with zero-valued indicators.
        """
        history = HistoryLog()
        if reports:
            for report in reports:
                record(history, report)
        else:
            rows = zip(
                data["trajectory"],
                data["algorithms"],
                data["evals_used"],
                strict=True,
            )
            for epoch, (best, algorithm, used) in enumerate(rows):
                record(
                    history,
                    FeedbackReport(
                        epoch=epoch,
                        algorithm=AlgorithmId(algorithm),
                        best_fitness=float(best),
                        mean_fitness=float(best),
                        improvement_rate=0.0,
                        convergence_rate=0.0,
                        stagnation_count=0,
                        diversity=0.0,
                        evals_used_total=int(used),
                        budget_fraction=0.0,
                        epoch_wall_time=0.0,
                    ),
                )
        best = data["best"]
        result = cls(
            strategy=str(data["strategy"]),
            function=str(data["function"]),
            seed=int(data["seed"]),
            best=Individual(best["position"], best["fitness"]),
            history=history,
            switches=[SwitchEvent.from_dict(event) for event in data["switches"]],
            total_evals=int(data["total_evals"]),
            initial_evals=int(data["initial_evals"]),
            config=dict(data.get("config", {})),
        )
        history.switches.extend(result.switches)
        return result


def make_selector(config: RunConfig) -> Selector:
    """Build the selector named by ``config``."""
    if config.selector is SelectorKind.EXTERNAL and config.external is not None:
        trace = config.output_dir / TRACE_FILE if config.output_dir else None
        return ExternalSelector(config.external, config.policy, trace_path=trace)
    return RuleBasedSelector(config.policy)


def _better(candidate: Individual, incumbent: Individual) -> bool:
    return (
        candidate.fitness is not None
        and incumbent.fitness is not None
        and candidate.fitness < incumbent.fitness
    )


def _loop(  # noqa: PLR0913
    config: RunConfig,
    problem: Objective,
    selector: Selector,
    initial: AlgorithmId,
    strategy: str,
) -> RunResult:
    if problem.dim != config.problem.dim:
        message = (
            f"problem.dim is {config.problem.dim} but the objective has "
            f"{problem.dim} dimensions."
        )
        raise ConfigInvalidError(message)
    space = problem.space
    root = RandomStream(config.seed)
    population_rng = root.derive("population")
    search_rng = root.derive("metaheuristics")
    handover_rng = root.derive("handover")
    budget = EvaluationBudget(config.max_evals)

    population = random_population(space, config.population_size, population_rng)
    initial_evals = evaluate_members(population, problem, budget)
    best = best_of(population).copy()
    state = init(initial, population, space, config.algorithm_params(initial))
    history = HistoryLog()
    dormant: dict[AlgorithmId, AlgorithmState] = {}
    logger.info(
        "Starting %s on %s (seed %d) with %s",
        strategy,
        config.problem.function,
        config.seed,
        initial,
    )

    while not budget.exhausted:
        started = time.perf_counter()
        before = float(best.fitness if best.fitness is not None else np.inf)
        state, stats = step_epoch(state, problem, budget, config.epoch_evals, search_rng)
        if _better(stats.best_individual, best):
            best = stats.best_individual.copy()
        report = compute_report(
            history,
            before,
            stats,
            state.population,
            space,
            budget,
            time.perf_counter() - started,
            algorithm=state.id,
        )
        record(history, report)
        if budget.remaining < config.epoch_evals:
            continue
        decision = selector.decide(report, history)
        if decision.action is Action.CONTINUE or decision.target is None:
            continue

        target = decision.target
        dormant[state.id] = state
        previous = dormant.get(target)
        moved = handover(
            state.population,
            problem,
            budget,
            config.handover,
            handover_rng,
            previous=None if previous is None else previous.population,
        )
        if previous is None:
            state = init(target, moved.population, space, config.algorithm_params(target))
        else:
            state = inject_population(previous, moved.population)
        if _better(best_of(state.population), best):
            best = best_of(state.population).copy()
        event = SwitchEvent(
            epoch=report.epoch + 1,
            from_algorithm=report.algorithm,
            to_algorithm=target,
            reason=decision.reason,
            best_fitness_at_switch=report.best_fitness,
            reevaluation_evals=moved.evals,
        )
        history.switches.append(event)
        logger.info(
            "Epoch %d: switching %s -> %s (%s)",
            event.epoch,
            event.from_algorithm,
            event.to_algorithm,
            event.reason,
        )

    logger.info(
        "Finished %s on %s (seed %d): best %.6g after %d evaluations",
        strategy,
        config.problem.function,
        config.seed,
        best.fitness,
        budget.used,
    )
    return RunResult(
        strategy=strategy,
        function=config.problem.function,
        seed=config.seed,
        best=best,
        history=history,
        switches=list(history.switches),
        total_evals=budget.used,
        initial_evals=initial_evals,
        config=config.to_dict(),
    )


def run_pmf(
    config: RunConfig,
    problem: Objective,
    selector: Selector | None = None,
) -> RunResult:
    """Run the adaptive loop until the budget is spent.

    Args:
    ----
        config (RunConfig): Run settings.
        problem (Objective): Objective to minimise; usually ``config.problem.build()``.
        selector (Selector | None): Overrides the selector named in ``config``.

    Returns:
    -------
        RunResult: Trajectory, switches and the global best.

    """
    chosen = make_selector(config) if selector is None else selector
    return _loop(config, problem, chosen, config.initial_algorithm, PMF_STRATEGY)


def run_baseline(
    id: AlgorithmId,  # noqa: A002
    config: RunConfig,
    problem: Objective,
) -> RunResult:
    """The same loop with ``id`` fixed for the whole run."""
    return _loop(config, problem, ContinueSelector(), id, str(id))


@dataclass(frozen=True)
class ExperimentConfig:
    """A strategies x functions x seeds matrix around a run template."""

    template: RunConfig = field(default_factory=RunConfig)
    strategies: tuple[str, ...] = STRATEGIES
    functions: tuple[str, ...] = (
        "sphere",
        "rastrigin",
        "rosenbrock",
        "ackley",
        "f1_2022_like",
    )
    seeds: tuple[int, ...] = tuple(range(20))
    output_dir: Path = Path("out")
    plot: bool = True
    workers: int = 1

    def __post_init__(self: Self) -> None:
        """Validate the three axes."""
        for axis in ("strategies", "functions", "seeds"):
            if not getattr(self, axis):
                message = f"experiment.{axis} must not be empty."
                raise ConfigInvalidError(message)
        unknown = [s for s in self.strategies if s not in STRATEGIES]
        if unknown:
            message = f"Unknown strategy {unknown[0]!r}, expected one of {', '.join(STRATEGIES)}."
            raise ConfigInvalidError(message)
        for function in self.functions:
            ProblemDescriptor(function, self.template.problem.dim)
        if self.workers < 1:
            message = f"experiment.workers must be positive, got {self.workers}."
            raise ConfigInvalidError(message)


@dataclass(frozen=True)
class Cell:
    """One run of the experiment matrix."""

    strategy: str
    function: str
    seed: int

    @property
    def run_id(self: Self) -> str:
        """Same layout as :attr:`RunResult.run_id`."""
        return f"{self.strategy}/{self.function}/seed-{self.seed}"


def cells(experiment: ExperimentConfig) -> list[Cell]:
    """Strategies, then functions, then seeds."""
    return [
        Cell(strategy, function, seed)
        for strategy in experiment.strategies
        for function in experiment.functions
        for seed in experiment.seeds
    ]


def cell_config(experiment: ExperimentConfig, cell: Cell) -> RunConfig:
    """The template with the cell's function and seed filled in.

    The problem instance keeps the template's problem seed so every cell of
    a function optimizes the same instance.
    """
    template = experiment.template
    problem = ProblemDescriptor(cell.function, template.problem.dim, template.problem.seed)
    return replace(
        template,
        problem=problem,
        seed=cell.seed,
        output_dir=experiment.output_dir / cell.run_id,
    )


def run_cell(config: RunConfig, strategy: str) -> RunResult:
    """Run one strategy on the problem described by ``config``."""
    problem = config.problem.build()
    if strategy == PMF_STRATEGY:
        return run_pmf(config, problem)
    return run_baseline(AlgorithmId(strategy), config, problem)


def _run_cell_safely(job: tuple[RunConfig, Cell]) -> RunResult | str:
    config, cell = job
    try:
        return run_cell(config, cell.strategy)
    except Exception as error:  # noqa: BLE001
        logger.error("Cell %s failed: %s", cell.run_id, error)  # noqa: TRY400
        return f"{type(error).__name__}: {error}"


@dataclass(frozen=True)
class GroupSummary:
    """Statistics of one (strategy, function) group over seeds."""

    strategy: str
    function: str
    finals: tuple[float, ...]
    median: float
    q1: float
    q3: float
    switch_median: float
    switch_mean: float
    usage: Mapping[str, int]
    median_trajectory: tuple[float, ...]
    rank: int = 0

    @property
    def iqr(self: Self) -> float:
        """Interquartile range of the final fitness values."""
        return self.q3 - self.q1

    def to_dict(self: Self) -> dict[str, Any]:
        """Plain JSON types."""
        return {
            "strategy": self.strategy,
            "function": self.function,
            "runs": len(self.finals),
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "iqr": self.iqr,
            "rank": self.rank,
            "switch_median": self.switch_median,
            "switch_mean": self.switch_mean,
            "usage": dict(self.usage),
            "finals": list(self.finals),
            "median_trajectory": list(self.median_trajectory),
        }


@dataclass
class ExperimentSummary:
    """Results and statistics of a whole experiment."""

    results: dict[Cell, RunResult]
    failures: dict[Cell, str]
    groups: list[GroupSummary]

    def to_dict(self: Self) -> dict[str, Any]:
        """Plain JSON types, groups in matrix order."""
        return {
            "cells": len(self.results) + len(self.failures),
            "completed": len(self.results),
            "failures": {cell.run_id: error for cell, error in self.failures.items()},
            "groups": [group.to_dict() for group in self.groups],
        }


def median_trajectory(trajectories: Sequence[Sequence[float]]) -> list[float]:
    """Per-epoch median; shorter runs are padded with their last value."""
    length = max(len(t) for t in trajectories)
    padded = np.array([[*t, *([t[-1]] * (length - len(t)))] for t in trajectories])
    return [float(v) for v in np.median(padded, axis=0)]


def summarize(
    results: Mapping[Cell, RunResult],
    strategies: Sequence[str],
    functions: Sequence[str],
) -> list[GroupSummary]:
    """Group statistics and per-function ranks by median final fitness."""
    groups: list[GroupSummary] = []
    for strategy in strategies:
        for function in functions:
            runs = [
                result
                for cell, result in results.items()
                if cell.strategy == strategy and cell.function == function
            ]
            if not runs:
                continue
            finals = np.array([r.best.fitness for r in runs], dtype=np.float64)
            switches = np.array([len(r.switches) for r in runs], dtype=np.float64)
            usage = Counter(str(a) for r in runs for a in r.algorithms)
            groups.append(
                GroupSummary(
                    strategy=strategy,
                    function=function,
                    finals=tuple(float(v) for v in finals),
                    median=float(np.median(finals)),
                    q1=float(np.percentile(finals, 25)),
                    q3=float(np.percentile(finals, 75)),
                    switch_median=float(np.median(switches)),
                    switch_mean=float(np.mean(switches)),
                    usage=dict(sorted(usage.items())),
                    median_trajectory=tuple(median_trajectory([r.trajectory for r in runs])),
                ),
            )
    ranked: list[GroupSummary] = []
    for group in groups:
        same = sorted(g.median for g in groups if g.function == group.function)
        ranked.append(replace(group, rank=same.index(group.median) + 1))
    return ranked


def run_experiment(experiment: ExperimentConfig) -> ExperimentSummary:
    """Run every cell, in parallel when ``workers > 1``, and summarize.

    A failing cell is recorded and the rest still run.
    """
    matrix = cells(experiment)
    jobs = [(cell_config(experiment, cell), cell) for cell in matrix]
    logger.info("Running %d cells with %d worker(s)", len(jobs), experiment.workers)
    if experiment.workers > 1:
        with ProcessPoolExecutor(max_workers=experiment.workers) as executor:
            outcomes = list(executor.map(_run_cell_safely, jobs))
    else:
        outcomes = [_run_cell_safely(job) for job in jobs]
    results: dict[Cell, RunResult] = {}
    failures: dict[Cell, str] = {}
    for cell, outcome in zip(matrix, outcomes, strict=True):
        if isinstance(outcome, RunResult):
            results[cell] = outcome
        else:
            failures[cell] = outcome
    groups = summarize(results, experiment.strategies, experiment.functions)
    logger.info("Experiment finished: %d completed, %d failed", len(results), len(failures))
    return ExperimentSummary(results, failures, groups)
