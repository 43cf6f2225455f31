"""Population transfer from the outgoing algorithm to the incoming one."""

import logging
import math
from dataclasses import dataclass
from typing import Self

import numpy as np

from pmf.core import ConfigInvalidError
from pmf.core import DimensionMismatchError
from pmf.core import EvaluationBudget
from pmf.core import Individual
from pmf.core import Objective
from pmf.core import Population
from pmf.core import RandomStream
from pmf.core import SearchSpace
from pmf.core import evaluate_members
from pmf.core import random_population
from pmf.feedback import diversity

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HandoverConfig:
    """Knobs of the handover pipeline."""

    elite_fraction: float = 0.10
    restart_diversity_threshold: float = 0.01
    reevaluate_on_switch: bool = True
    hybrid_merge_enabled: bool = False
    donor_fraction: float = 0.5

    def __post_init__(self: Self) -> None:
        """Check that both fractions lie in ``[0, 1]``."""
        for name in ("elite_fraction", "donor_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                message = f"handover.{name} must lie in [0, 1], got {value}."
                raise ConfigInvalidError(message)
        if self.restart_diversity_threshold < 0:
            message = "handover.restart_diversity_threshold must be non-negative."
            raise ConfigInvalidError(message)


def elite_count(size: int, fraction: float) -> int:
    """``max(1, floor(fraction * size))``, or 0 when ``fraction`` is 0."""
    if fraction <= 0 or size == 0:
        return 0
    return min(size, max(1, math.floor(fraction * size)))


def _ranked(pop: Population) -> list[Individual]:
    order = np.argsort(pop.fitnesses(), kind="stable")
    return [pop[int(i)] for i in order]


def preserve_elites(pop: Population, fraction: float) -> Population:
    """Copies of the best members, stable on ties."""
    count = elite_count(len(pop), fraction)
    return Population([member.copy() for member in _ranked(pop)[:count]], pop.generation)


def adapt_population(
    elites: Population,
    donor: Population,
    space: SearchSpace,
    n: int,
    rng: RandomStream,
    donor_fraction: float = 0.5,
) -> Population:
    """Fill ``n`` slots with the elites, the next-best donors, then random points.

    Elites and donors together take ``floor(donor_fraction * n)`` slots (all
    elites are kept even if they exceed it); fresh uniform members fill the
    rest and carry no fitness.
    """
    for part in (elites, donor):
        if len(part) and part.dim != space.dim:
            message = f"Population has dimension {part.dim}, search space has {space.dim}."
            raise DimensionMismatchError(message)
    if len(elites) >= n:
        return Population([member.copy() for member in elites.members[:n]])
    members = [member.copy() for member in elites]
    injected = max(len(members), math.floor(donor_fraction * n))
    ranked = _ranked(donor) if len(donor) else []
    members += [member.copy() for member in ranked[len(elites) : injected]]
    missing = n - len(members)
    if missing > 0:
        members += random_population(space, missing, rng).members
    return Population(members)


def diversity_restart(
    pop: Population,
    space: SearchSpace,
    threshold: float,
    rng: RandomStream,
) -> Population:
    """Resample everything but the best member when diversity is below ``threshold``."""
    value = diversity(pop, space)
    if value >= threshold:
        return pop
    evaluated = [i for i, member in enumerate(pop) if member.fitness is not None]
    keep = min(evaluated, key=lambda i: float(pop[i].fitness or 0.0)) if evaluated else 0
    fresh = random_population(space, len(pop), rng)
    members = [pop[i].copy() if i == keep else fresh[i] for i in range(len(pop))]
    logger.info("Diversity %.3g below %.3g; restarted %d members", value, threshold, len(pop) - 1)
    return Population(members, pop.generation)


def reevaluate(
    pop: Population,
    problem: Objective,
    budget: EvaluationBudget,
    *,
    force: bool = True,
) -> int:
    """Give every member a fresh fitness; only the missing ones unless ``force``.

    Returns the number of evaluations charged. On ``BudgetExhaustedError``
    the members evaluated so far keep their values.
    """
    return evaluate_members(pop, problem, budget, only_missing=not force)


def hybrid_merge(a: Population, b: Population, n: int) -> Population:
    """The ``n`` best of ``a`` and ``b`` together; ties keep ``a`` first, then index."""
    if len(a) and len(b) and a.dim != b.dim:
        message = f"Cannot merge populations of dimension {a.dim} and {b.dim}."
        raise DimensionMismatchError(message)
    union = Population([*a.members, *b.members])
    return Population([member.copy() for member in _ranked(union)[:n]])


@dataclass(frozen=True)
class HandoverResult:
    """Population for the incoming algorithm and what producing it cost."""

    population: Population
    evals: int
    restarted: bool


def handover(  # noqa: PLR0913
    outgoing: Population,
    problem: Objective,
    budget: EvaluationBudget,
    config: HandoverConfig,
    rng: RandomStream,
    *,
    previous: Population | None = None,
) -> HandoverResult:
    """Run preserve, adapt, restart and re-evaluate in that order.

    Args:
    ----
        outgoing (Population): Evaluated population of the algorithm being left.
        problem (Objective): The objective, used for re-evaluation.
        budget (EvaluationBudget): Charged for every evaluation.
        config (HandoverConfig): Pipeline settings.
        rng (RandomStream): Source for random fill and restarts.
        previous (Population | None): Last population of the incoming algorithm,
            merged with ``outgoing`` when hybrid merging is enabled.

    Returns:
    -------
        HandoverResult: A fully evaluated population of ``len(outgoing)`` members.

    """
    n = len(outgoing)
    space = problem.space
    donor = outgoing
    if config.hybrid_merge_enabled and previous is not None and len(previous):
        donor = hybrid_merge(outgoing, previous, n)
    elites = preserve_elites(donor, config.elite_fraction)
    adapted = adapt_population(elites, donor, space, n, rng, config.donor_fraction)
    restarted = diversity_restart(adapted, space, config.restart_diversity_threshold, rng)
    evals = reevaluate(restarted, problem, budget, force=config.reevaluate_on_switch)
    return HandoverResult(restarted, evals, restarted is not adapted)
