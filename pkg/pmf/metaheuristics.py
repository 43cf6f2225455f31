"""Seven population metaheuristics behind one resumable epoch interface.

Every algorithm keeps its internal memory in an :class:`AlgorithmState`,
advances by whole or partial generations until an evaluation quantum is
spent, and can take over a population produced by any other algorithm.
"""

import dataclasses
import enum
import logging
import math
from abc import ABC
from abc import abstractmethod
from collections import deque
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any
from typing import ClassVar
from typing import Self

import numpy as np
import numpy.typing as npt

from pmf.core import BudgetExhaustedError
from pmf.core import ConfigInvalidError
from pmf.core import DimensionMismatchError
from pmf.core import EvaluationBudget
from pmf.core import Individual
from pmf.core import Matrix
from pmf.core import Objective
from pmf.core import PmfError
from pmf.core import Population
from pmf.core import RandomStream
from pmf.core import SearchSpace
from pmf.core import Vector
from pmf.core import best_of
from pmf.core import evaluate

logger = logging.getLogger(__name__)

DEFAULT_POPULATION_SIZE = 30


class AlgorithmId(enum.StrEnum):
    """The seven algorithms the framework can switch between."""

    GA = "GA"
    PSO = "PSO"
    DE = "DE"
    ACO = "ACO"
    SA = "SA"
    TS = "TS"
    CMAES = "CMAES"


@dataclass(frozen=True)
class GAParams:
    """Real-coded generational GA."""

    mutation_rate: float
    tournament_size: int = 2
    crossover_rate: float = 0.9
    blend_alpha: float = 0.5
    mutation_scale: float = 0.1
    elites: int = 1


@dataclass(frozen=True)
class PSOParams:
    """Global-best PSO with constriction-equivalent coefficients."""

    inertia: float = 0.729
    cognitive: float = 1.49445
    social: float = 1.49445
    velocity_clamp: float = 0.2


@dataclass(frozen=True)
class DEParams:
    """DE/rand/1/bin."""

    mutation_factor: float = 0.5
    crossover_rate: float = 0.9


@dataclass(frozen=True)
class ACOParams:
    """Solution-archive ACO for continuous domains."""

    archive_size: int = 10
    locality: float = 0.1
    deviation: float = 0.85


@dataclass(frozen=True)
class SAParams:
    """Independent Metropolis chains with a shared geometric schedule."""

    neighbour_scale: float = 0.1
    cooling: float = 0.95
    min_temperature: float = 1e-9


@dataclass(frozen=True)
class TSParams:
    """Independent tabu trajectories over signed coordinate moves."""

    patience: int
    step: float = 0.05
    tabu_tenure: int = 5
    candidates: int = 4
    min_step: float = 1e-6


@dataclass(frozen=True)
class CMAESParams:
    """(mu/mu_w, lambda)-CMA-ES; learning rates follow from the dimension."""

    population_size: int
    parents: int
    sigma_fraction: float = 0.3
    sigma_floor: float = 1e-3
    eigenvalue_floor: float = 1e-14


AlgorithmParams = GAParams | PSOParams | DEParams | ACOParams | SAParams | TSParams | CMAESParams


def default_params(
    id: AlgorithmId,  # noqa: A002
    dim: int,
    population_size: int = DEFAULT_POPULATION_SIZE,
) -> AlgorithmParams:
    """Return the canonical parameter set for an algorithm."""
    match id:
        case AlgorithmId.GA:
            return GAParams(mutation_rate=1.0 / dim)
        case AlgorithmId.PSO:
            return PSOParams()
        case AlgorithmId.DE:
            return DEParams()
        case AlgorithmId.ACO:
            return ACOParams()
        case AlgorithmId.SA:
            return SAParams()
        case AlgorithmId.TS:
            return TSParams(patience=2 * dim)
        case AlgorithmId.CMAES:
            return CMAESParams(
                population_size=population_size,
                parents=max(1, population_size // 2),
            )


def params_from_mapping(
    id: AlgorithmId,  # noqa: A002
    dim: int,
    population_size: int,
    overrides: Mapping[str, Any],
) -> AlgorithmParams:
    """Apply configuration overrides on top of the defaults."""
    defaults = default_params(id, dim, population_size)
    known = {f.name for f in dataclasses.fields(defaults)}
    unknown = sorted(set(overrides) - known)
    if unknown:
        message = f"Unknown parameter(s) for {id}: {', '.join(unknown)}."
        raise ConfigInvalidError(message)
    return dataclasses.replace(defaults, **overrides)


def params_to_dict(params: AlgorithmParams) -> dict[str, Any]:
    """Serialize a parameter set to plain types."""
    return dataclasses.asdict(params)


@dataclass
class SwarmMemory:
    """PSO velocities and personal/global bests."""

    velocities: Matrix
    personal_best: Matrix
    personal_best_fitness: Vector
    global_best: int

    @property
    def global_best_position(self: Self) -> Vector:
        """Position of the best personal best."""
        return self.personal_best[self.global_best]


@dataclass
class ArchiveMemory:
    """ACO solution archive, sorted best first, with rank weights."""

    positions: Matrix
    fitness: Vector
    weights: Vector


@dataclass
class AnnealingMemory:
    """Temperature shared by all chains."""

    temperature: float


@dataclass
class TabuMemory:
    """Per-chain tabu lists, step fractions and best values."""

    tabu: list[deque[tuple[int, int]]]
    steps: Vector
    chain_best: Vector
    idle: npt.NDArray[np.int64]


@dataclass
class CMAESMemory:
    """Distribution state and the strategy constants derived from it."""

    mean: Vector
    sigma: float
    covariance: Matrix
    path_c: Vector
    path_sigma: Vector
    weights: Vector
    mueff: float
    cc: float
    cs: float
    c1: float
    cmu: float
    damps: float
    chi_n: float
    updates: int = 0


Memory = SwarmMemory | ArchiveMemory | AnnealingMemory | TabuMemory | CMAESMemory


@dataclass
class AlgorithmState:
    """Everything needed to resume an algorithm where it stopped."""

    id: AlgorithmId
    population: Population
    space: SearchSpace
    params: AlgorithmParams
    memory: Memory | None = None


@dataclass(frozen=True)
class EpochStats:
    """Summary of one epoch of work."""

    evals_used: int
    best_fitness: float
    mean_fitness: float
    best_individual: Individual


def _expect[T](value: object, kind: type[T]) -> T:
    if not isinstance(value, kind):
        message = f"Expected {kind.__name__}, got {type(value).__name__}."
        raise PmfError(message)
    return value


def _evaluate_rows(
    positions: Matrix,
    problem: Objective,
    budget: EvaluationBudget,
    limit: int,
) -> list[Individual]:
    """Evaluate the first ``limit`` rows in order."""
    evaluated = []
    for row in positions[:limit]:
        candidate = Individual(row)
        evaluate(candidate, problem, budget)
        evaluated.append(candidate)
    return evaluated


def repair_covariance(covariance: Matrix, floor: float) -> Matrix:
    """Return a symmetric matrix whose eigenvalues are at least ``floor``."""
    symmetric = (covariance + covariance.T) / 2.0
    values, vectors = np.linalg.eigh(symmetric)
    if values.min() < floor:
        symmetric = (vectors * np.maximum(values, floor)) @ vectors.T
        symmetric = (symmetric + symmetric.T) / 2.0
    return np.asarray(symmetric, dtype=np.float64)


class Metaheuristic(ABC):
    """One algorithm: derives memory from a population, runs generations."""

    id: ClassVar[AlgorithmId]

    @abstractmethod
    def derive(
        self: Self,
        population: Population,
        space: SearchSpace,
        params: AlgorithmParams,
    ) -> Memory | None:
        """Build the algorithm memory for a freshly injected population."""

    @abstractmethod
    def generation(
        self: Self,
        state: AlgorithmState,
        problem: Objective,
        budget: EvaluationBudget,
        rng: RandomStream,
        limit: int,
    ) -> None:
        """Run one generation spending at most ``limit`` evaluations."""

    def end_epoch(self: Self, state: AlgorithmState) -> None:
        """Hook called once after the last generation of an epoch."""

    def adopt(self: Self, state: AlgorithmState, index: int) -> None:
        """Hook called after member ``index`` was replaced by the epoch champion."""


class GeneticAlgorithm(Metaheuristic):
    """Tournament selection, blend crossover, Gaussian mutation, one elite."""

    id = AlgorithmId.GA

    def derive(
        self: Self,
        population: Population,  # noqa: ARG002
        space: SearchSpace,  # noqa: ARG002
        params: AlgorithmParams,  # noqa: ARG002
    ) -> None:
        """The population is the whole state."""
        return

    @staticmethod
    def tournament(fitness: Vector, size: int, rng: RandomStream) -> int:
        """Pick ``size`` members at random and return the fittest one's index."""
        entrants = rng.integers(fitness.size, size)
        return int(entrants[np.argmin(fitness[entrants])])

    def generation(
        self: Self,
        state: AlgorithmState,
        problem: Objective,
        budget: EvaluationBudget,
        rng: RandomStream,
        limit: int,
    ) -> None:
        """Breed ``N - elites`` children and replace the population."""
        params = _expect(state.params, GAParams)
        space = state.space
        population = state.population
        fitness = population.fitnesses()
        positions = population.positions()
        order = np.argsort(fitness, kind="stable")
        n_elites = min(params.elites, len(population))
        elites = [population[int(i)].copy() for i in order[:n_elites]]
        sigma = params.mutation_scale * space.width
        children = np.empty((len(population) - n_elites, space.dim))
        for c in range(children.shape[0]):
            first = self.tournament(fitness, params.tournament_size, rng)
            second = self.tournament(fitness, params.tournament_size, rng)
            if rng.random() < params.crossover_rate:
                low = np.minimum(positions[first], positions[second])
                high = np.maximum(positions[first], positions[second])
                spread = params.blend_alpha * (high - low)
                child = rng.uniform(low - spread, high + spread)
            else:
                child = positions[first].copy()
            mutate = rng.random(space.dim) < params.mutation_rate
            child = child + np.where(mutate, rng.normal(0.0, sigma), 0.0)
            children[c] = space.clip(child)
        offspring = _evaluate_rows(children, problem, budget, limit)
        survivors = [population[int(i)].copy() for i in order[n_elites:]]
        members = elites + offspring
        members += survivors[: len(population) - len(members)]
        state.population = Population(members, population.generation + 1)


class ParticleSwarm(Metaheuristic):
    """Global-best PSO with velocity clamping."""

    id = AlgorithmId.PSO

    def derive(
        self: Self,
        population: Population,
        space: SearchSpace,  # noqa: ARG002
        params: AlgorithmParams,  # noqa: ARG002
    ) -> SwarmMemory:
        """Zero velocities; personal bests are the injected members."""
        positions = population.positions()
        fitness = population.fitnesses()
        return SwarmMemory(
            velocities=np.zeros_like(positions),
            personal_best=positions.copy(),
            personal_best_fitness=fitness.copy(),
            global_best=int(np.argmin(fitness)),
        )

    def generation(
        self: Self,
        state: AlgorithmState,
        problem: Objective,
        budget: EvaluationBudget,
        rng: RandomStream,
        limit: int,
    ) -> None:
        """Move every particle once; only the first ``limit`` are evaluated."""
        params = _expect(state.params, PSOParams)
        memory = _expect(state.memory, SwarmMemory)
        space = state.space
        population = state.population
        positions = population.positions()
        shape = positions.shape
        r_cognitive = rng.random(shape)
        r_social = rng.random(shape)
        velocities = (
            params.inertia * memory.velocities
            + params.cognitive * r_cognitive * (memory.personal_best - positions)
            + params.social * r_social * (memory.global_best_position - positions)
        )
        v_max = params.velocity_clamp * space.width
        velocities = np.clip(velocities, -v_max, v_max)
        moved = space.clip(positions + velocities)
        evaluated = _evaluate_rows(moved, problem, budget, limit)
        for i, particle in enumerate(evaluated):
            memory.velocities[i] = velocities[i]
            if particle.fitness is not None and (
                particle.fitness <= memory.personal_best_fitness[i]
            ):
                memory.personal_best[i] = particle.position
                memory.personal_best_fitness[i] = particle.fitness
        memory.global_best = int(np.argmin(memory.personal_best_fitness))
        members = evaluated + population.members[len(evaluated) :]
        state.population = Population(members, population.generation + 1)

    def adopt(self: Self, state: AlgorithmState, index: int) -> None:
        """Restart the particle from rest at the champion's position."""
        memory = _expect(state.memory, SwarmMemory)
        member = state.population[index]
        memory.velocities[index] = 0.0
        if member.fitness is not None and (
            member.fitness <= memory.personal_best_fitness[index]
        ):
            memory.personal_best[index] = member.position
            memory.personal_best_fitness[index] = member.fitness
            memory.global_best = int(np.argmin(memory.personal_best_fitness))


class DifferentialEvolution(Metaheuristic):
    """DE/rand/1/bin with greedy one-to-one replacement."""

    id = AlgorithmId.DE

    def derive(
        self: Self,
        population: Population,  # noqa: ARG002
        space: SearchSpace,  # noqa: ARG002
        params: AlgorithmParams,  # noqa: ARG002
    ) -> None:
        """The population vectors are the whole state."""
        return

    def generation(
        self: Self,
        state: AlgorithmState,
        problem: Objective,
        budget: EvaluationBudget,
        rng: RandomStream,
        limit: int,
    ) -> None:
        """Build a trial for every member, then evaluate and select in order."""
        params = _expect(state.params, DEParams)
        space = state.space
        population = state.population
        positions = population.positions()
        n = len(population)
        trials = np.empty_like(positions)
        for i in range(n):
            others = np.delete(np.arange(n), i)
            r1, r2, r3 = rng.choice(others, 3, replace=False)
            mutant = positions[r1] + params.mutation_factor * (
                positions[r2] - positions[r3]
            )
            j_rand = int(rng.integers(space.dim))
            cross = rng.random(space.dim) < params.crossover_rate
            cross[j_rand] = True
            trials[i] = space.clip(np.where(cross, mutant, positions[i]))
        evaluated = _evaluate_rows(trials, problem, budget, limit)
        members = list(population.members)
        for i, trial in enumerate(evaluated):
            parent = members[i]
            if (
                trial.fitness is not None
                and parent.fitness is not None
                and trial.fitness <= parent.fitness
            ):
                members[i] = trial
        state.population = Population(members, population.generation + 1)


class AntColony(Metaheuristic):
    """Gaussian-kernel sampling around a ranked solution archive."""

    id = AlgorithmId.ACO

    @staticmethod
    def rank_weights(size: int, locality: float) -> Vector:
        """Gaussian weights over archive ranks (best rank first)."""
        ranks = np.arange(size, dtype=np.float64)
        spread = locality * size
        return np.asarray(
            np.exp(-(ranks**2) / (2.0 * spread**2)) / (spread * math.sqrt(2.0 * math.pi)),
            dtype=np.float64,
        )

    def derive(
        self: Self,
        population: Population,
        space: SearchSpace,  # noqa: ARG002
        params: AlgorithmParams,
    ) -> ArchiveMemory:
        """The archive holds the ``k`` best members."""
        aco = _expect(params, ACOParams)
        fitness = population.fitnesses()
        order = np.argsort(fitness, kind="stable")[: aco.archive_size]
        return ArchiveMemory(
            positions=population.positions()[order],
            fitness=fitness[order],
            weights=self.rank_weights(order.size, aco.locality),
        )

    def generation(
        self: Self,
        state: AlgorithmState,
        problem: Objective,
        budget: EvaluationBudget,
        rng: RandomStream,
        limit: int,
    ) -> None:
        """Sample one ant per population slot and refresh the archive."""
        params = _expect(state.params, ACOParams)
        memory = _expect(state.memory, ArchiveMemory)
        space = state.space
        population = state.population
        archive = memory.positions
        size = archive.shape[0]
        if size > 1:
            distances = np.abs(archive[:, None, :] - archive[None, :, :]).sum(axis=0)
            deviations = params.deviation * distances / (size - 1)
        else:
            deviations = params.deviation * 0.1 * np.broadcast_to(space.width, archive.shape)
        guides = rng.choice(size, len(population), p=memory.weights / memory.weights.sum())
        noise = rng.normal(size=(len(population), space.dim))
        ants = space.clip(archive[guides] + deviations[guides] * noise)
        evaluated = _evaluate_rows(ants, problem, budget, limit)
        merged_positions = np.vstack([archive, *(ant.position for ant in evaluated)])
        merged_fitness = np.concatenate(
            [memory.fitness, np.array([ant.fitness for ant in evaluated], dtype=np.float64)],
        )
        keep = np.argsort(merged_fitness, kind="stable")[:size]
        memory.positions = merged_positions[keep]
        memory.fitness = merged_fitness[keep]
        members = evaluated + population.members[len(evaluated) :]
        state.population = Population(members, population.generation + 1)


class SimulatedAnnealing(Metaheuristic):
    """One Metropolis chain per population slot."""

    id = AlgorithmId.SA

    def derive(
        self: Self,
        population: Population,
        space: SearchSpace,  # noqa: ARG002
        params: AlgorithmParams,
    ) -> AnnealingMemory:
        """Start at the standard deviation of the injected fitness values."""
        sa = _expect(params, SAParams)
        spread = float(np.std(population.fitnesses()))
        return AnnealingMemory(temperature=max(spread, sa.min_temperature))

    def generation(
        self: Self,
        state: AlgorithmState,
        problem: Objective,
        budget: EvaluationBudget,
        rng: RandomStream,
        limit: int,
    ) -> None:
        """Propose a Gaussian neighbour for every chain and apply Metropolis."""
        params = _expect(state.params, SAParams)
        memory = _expect(state.memory, AnnealingMemory)
        space = state.space
        population = state.population
        positions = population.positions()
        steps = rng.normal(0.0, params.neighbour_scale * space.width, positions.shape)
        candidates = space.clip(positions + steps)
        draws = rng.random(len(population))
        evaluated = _evaluate_rows(candidates, problem, budget, limit)
        members = list(population.members)
        for i, candidate in enumerate(evaluated):
            current = members[i]
            if candidate.fitness is None or current.fitness is None:
                continue
            delta = candidate.fitness - current.fitness
            if delta <= 0 or draws[i] < math.exp(-delta / memory.temperature):
                members[i] = candidate
        state.population = Population(members, population.generation + 1)

    def end_epoch(self: Self, state: AlgorithmState) -> None:
        """Cool geometrically once per epoch."""
        params = _expect(state.params, SAParams)
        memory = _expect(state.memory, AnnealingMemory)
        memory.temperature = max(memory.temperature * params.cooling, params.min_temperature)


class TabuSearch(Metaheuristic):
    """Signed coordinate moves with a short memory of forbidden reversals."""

    id = AlgorithmId.TS

    def derive(
        self: Self,
        population: Population,
        space: SearchSpace,  # noqa: ARG002
        params: AlgorithmParams,
    ) -> TabuMemory:
        """Empty tabu lists, initial step on every chain."""
        ts = _expect(params, TSParams)
        n = len(population)
        return TabuMemory(
            tabu=[deque(maxlen=ts.tabu_tenure) for _ in range(n)],
            steps=np.full(n, ts.step),
            chain_best=population.fitnesses().copy(),
            idle=np.zeros(n, dtype=np.int64),
        )

    def generation(
        self: Self,
        state: AlgorithmState,
        problem: Objective,
        budget: EvaluationBudget,
        rng: RandomStream,
        limit: int,
    ) -> None:
        """Advance each chain by its best admissible sampled move."""
        params = _expect(state.params, TSParams)
        memory = _expect(state.memory, TabuMemory)
        space = state.space
        population = state.population
        members = list(population.members)
        n_moves = 2 * space.dim
        spent = 0
        for chain, current in enumerate(members):
            if spent >= limit:
                break
            sample = min(params.candidates, n_moves, limit - spent)
            chosen: Individual | None = None
            chosen_value = math.inf
            chosen_move = (0, 0)
            for move in rng.choice(n_moves, sample, replace=False):
                coordinate, sign = int(move) // 2, 1 - 2 * (int(move) % 2)
                position = current.position.copy()
                position[coordinate] += sign * memory.steps[chain] * space.width[coordinate]
                candidate = Individual(space.clip(position))
                value = evaluate(candidate, problem, budget)
                spent += 1
                aspiration = value < memory.chain_best[chain]
                if (coordinate, sign) in memory.tabu[chain] and not aspiration:
                    continue
                if chosen is None or value < chosen_value:
                    chosen, chosen_value = candidate, value
                    chosen_move = (coordinate, sign)
            improved = False
            if chosen is not None and chosen.fitness is not None:
                members[chain] = chosen
                memory.tabu[chain].append((chosen_move[0], -chosen_move[1]))
                if chosen.fitness < memory.chain_best[chain]:
                    memory.chain_best[chain] = chosen.fitness
                    improved = True
            memory.idle[chain] = 0 if improved else memory.idle[chain] + 1
            if memory.idle[chain] >= params.patience:
                memory.steps[chain] = max(memory.steps[chain] / 2.0, params.min_step)
                memory.idle[chain] = 0
        state.population = Population(members, population.generation + 1)

    def adopt(self: Self, state: AlgorithmState, index: int) -> None:
        """Keep the chain best consistent with the adopted champion."""
        memory = _expect(state.memory, TabuMemory)
        fitness = state.population[index].fitness
        if fitness is not None:
            memory.chain_best[index] = min(memory.chain_best[index], fitness)


class CovarianceMatrixAdaptation(Metaheuristic):
    """CMA-ES with rank-one and rank-mu covariance updates."""

    id = AlgorithmId.CMAES

    def derive(
        self: Self,
        population: Population,
        space: SearchSpace,
        params: AlgorithmParams,
    ) -> CMAESMemory:
        """Centre on the best half; step size from the population spread."""
        cma = _expect(params, CMAESParams)
        dim = space.dim
        fitness = population.fitnesses()
        positions = population.positions()
        half = max(1, len(population) // 2)
        best_half = np.argsort(fitness, kind="stable")[:half]
        mean = positions[best_half].mean(axis=0)
        spread = float(np.mean(np.std(positions, axis=0)))
        sigma = max(cma.sigma_fraction * spread, cma.sigma_floor * float(np.mean(space.width)))
        mu = min(cma.parents, cma.population_size)
        raw = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        weights = raw / raw.sum()
        mueff = float(1.0 / np.sum(weights**2))
        c1 = 2.0 / ((dim + 1.3) ** 2 + mueff)
        cs = (mueff + 2.0) / (dim + mueff + 5.0)
        return CMAESMemory(
            mean=mean,
            sigma=sigma,
            covariance=np.eye(dim),
            path_c=np.zeros(dim),
            path_sigma=np.zeros(dim),
            weights=weights,
            mueff=mueff,
            cc=(4.0 + mueff / dim) / (dim + 4.0 + 2.0 * mueff / dim),
            cs=cs,
            c1=c1,
            cmu=min(1.0 - c1, 2.0 * (mueff - 2.0 + 1.0 / mueff) / ((dim + 2.0) ** 2 + mueff)),
            damps=2.0 * mueff / cma.population_size + 0.3 + cs,
            chi_n=math.sqrt(dim) * (1.0 - 1.0 / (4.0 * dim) + 1.0 / (21.0 * dim**2)),
        )

    def generation(
        self: Self,
        state: AlgorithmState,
        problem: Objective,
        budget: EvaluationBudget,
        rng: RandomStream,
        limit: int,
    ) -> None:
        """Sample lambda points; update the distribution on a full generation."""
        params = _expect(state.params, CMAESParams)
        memory = _expect(state.memory, CMAESMemory)
        space = state.space
        population = state.population
        values, basis = np.linalg.eigh(memory.covariance)
        scales = np.sqrt(np.maximum(values, params.eigenvalue_floor))
        noise = rng.normal(size=(params.population_size, space.dim))
        samples = space.clip(memory.mean + memory.sigma * ((noise * scales) @ basis.T))
        evaluated = _evaluate_rows(samples, problem, budget, limit)
        if len(evaluated) == params.population_size:
            self._update(memory, params, samples, evaluated, basis, scales, space)
        members = evaluated + population.members[len(evaluated) :]
        state.population = Population(members, population.generation + 1)

    @staticmethod
    def _update(  # noqa: PLR0913
        memory: CMAESMemory,
        params: CMAESParams,
        samples: Matrix,
        evaluated: list[Individual],
        basis: Matrix,
        scales: Vector,
        space: SearchSpace,
    ) -> None:
        dim = space.dim
        fitness = np.array([ind.fitness for ind in evaluated], dtype=np.float64)
        parents = np.argsort(fitness, kind="stable")[: memory.weights.size]
        steps = (samples[parents] - memory.mean) / memory.sigma
        step_mean = memory.weights @ steps
        memory.mean = space.clip(memory.mean + memory.sigma * step_mean)

        inverse_root = (basis / scales) @ basis.T
        memory.path_sigma = (1.0 - memory.cs) * memory.path_sigma + math.sqrt(
            memory.cs * (2.0 - memory.cs) * memory.mueff,
        ) * (inverse_root @ step_mean)
        memory.updates += 1
        norm_sigma = float(np.linalg.norm(memory.path_sigma))
        correction = math.sqrt(1.0 - (1.0 - memory.cs) ** (2 * memory.updates))
        hsig = norm_sigma / correction / memory.chi_n < 1.4 + 2.0 / (dim + 1.0)
        memory.path_c = (1.0 - memory.cc) * memory.path_c + float(hsig) * math.sqrt(
            memory.cc * (2.0 - memory.cc) * memory.mueff,
        ) * step_mean

        c1a = memory.c1 * (1.0 - (1.0 - float(hsig)) * memory.cc * (2.0 - memory.cc))
        rank_mu = (steps.T * memory.weights) @ steps
        covariance = (
            (1.0 - c1a - memory.cmu) * memory.covariance
            + memory.c1 * np.outer(memory.path_c, memory.path_c)
            + memory.cmu * rank_mu
        )
        memory.covariance = repair_covariance(covariance, params.eigenvalue_floor)
        memory.sigma *= math.exp(
            min(1.0, (memory.cs / memory.damps) * (norm_sigma / memory.chi_n - 1.0)),
        )
        # sigma above the box size only produces clipped samples
        memory.sigma = min(memory.sigma, float(np.max(space.width)))


ALGORITHMS: Mapping[AlgorithmId, Metaheuristic] = {
    algorithm.id: algorithm
    for algorithm in (
        GeneticAlgorithm(),
        ParticleSwarm(),
        DifferentialEvolution(),
        AntColony(),
        SimulatedAnnealing(),
        TabuSearch(),
        CovarianceMatrixAdaptation(),
    )
}


def _check_population(pop: Population, space: SearchSpace) -> None:
    if len(pop) == 0:
        message = "Cannot initialize an algorithm with an empty population."
        raise PmfError(message)
    if pop.dim != space.dim:
        message = f"Population has dimension {pop.dim}, search space has {space.dim}."
        raise DimensionMismatchError(message)
    pop.fitnesses()


def _fit_params(params: AlgorithmParams, size: int) -> AlgorithmParams:
    if isinstance(params, CMAESParams) and params.population_size != size:
        return dataclasses.replace(
            params,
            population_size=size,
            parents=max(1, min(params.parents, size // 2)),
        )
    return params


def init(
    id: AlgorithmId,  # noqa: A002
    pop: Population,
    space: SearchSpace,
    params: AlgorithmParams | None = None,
) -> AlgorithmState:
    """Create an algorithm state around an evaluated population.

    Args:
    ----
        id (AlgorithmId): Which algorithm to run.
        pop (Population): Evaluated, in-bounds starting members.
        space (SearchSpace): The box the members live in.
        params (AlgorithmParams | None): Overrides the defaults when given.

    Returns:
    -------
        AlgorithmState: A state whose memory is derived from ``pop`` alone.

    Raises:
    ------
        DimensionMismatchError: if ``pop`` and ``space`` disagree on dimension.
        UnevaluatedMemberError: if a member has no fitness.

    """
    _check_population(pop, space)
    chosen = default_params(id, space.dim, len(pop)) if params is None else params
    chosen = _fit_params(chosen, len(pop))
    population = pop.copy()
    memory = ALGORITHMS[id].derive(population, space, chosen)
    logger.debug("Initialized %s with %d members", id, len(population))
    return AlgorithmState(id, population, space, chosen, memory)


def inject_population(state: AlgorithmState, pop: Population) -> AlgorithmState:
    """Replace the population and re-derive the memory exactly as :func:`init` does."""
    if pop.dim != state.space.dim:
        message = f"Population has dimension {pop.dim}, state has {state.space.dim}."
        raise DimensionMismatchError(message)
    return init(state.id, pop, state.space, state.params)


def step_epoch(
    state: AlgorithmState,
    problem: Objective,
    budget: EvaluationBudget,
    epoch_evals: int,
    rng: RandomStream,
) -> tuple[AlgorithmState, EpochStats]:
    """Run generations until ``min(epoch_evals, remaining)`` evaluations are spent.

    The best member seen during the epoch is written back over the worst
    member of the final population if the last generation lost it.
    """
    if budget.exhausted:
        message = f"Evaluation budget of {budget.max_evals} is exhausted."
        raise BudgetExhaustedError(message)
    if epoch_evals < 1:
        message = f"epoch_evals must be positive, got {epoch_evals}."
        raise PmfError(message)
    algorithm = ALGORITHMS[state.id]
    quota = min(epoch_evals, budget.remaining)
    start = budget.used
    champion = best_of(state.population).copy()
    while (spent := budget.used - start) < quota:
        algorithm.generation(state, problem, budget, rng, quota - spent)
        if budget.used - start == spent:
            message = f"{state.id} made no progress in a generation."
            raise PmfError(message)
        current = best_of(state.population)
        if current.fitness is not None and champion.fitness is not None and (
            current.fitness < champion.fitness
        ):
            champion = current.copy()
    algorithm.end_epoch(state)

    fitness = state.population.fitnesses()
    if champion.fitness is not None and champion.fitness < fitness.min():
        worst = int(np.argmax(fitness))
        state.population.members[worst] = champion.copy()
        algorithm.adopt(state, worst)
        fitness = state.population.fitnesses()
    stats = EpochStats(
        evals_used=budget.used - start,
        best_fitness=float(fitness.min()),
        mean_fitness=float(fitness.mean()),
        best_individual=best_of(state.population).copy(),
    )
    logger.debug(
        "%s epoch: %d evals, best %.6g, mean %.6g",
        state.id,
        stats.evals_used,
        stats.best_fitness,
        stats.mean_fitness,
    )
    return state, stats
