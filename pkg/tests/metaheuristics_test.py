"""Tests for the seven metaheuristics and the epoch driver."""

from typing import Self

import numpy as np
import pytest

from pmf import metaheuristics
from pmf.benchmarks import BaseFunction
from pmf.benchmarks import Problem
from pmf.core import BudgetExhaustedError
from pmf.core import ConfigInvalidError
from pmf.core import DimensionMismatchError
from pmf.core import EvaluationBudget
from pmf.core import Population
from pmf.core import RandomStream
from pmf.core import SearchSpace
from pmf.core import UnevaluatedMemberError
from pmf.core import Vector
from pmf.core import evaluate_members
from pmf.core import random_population
from pmf.metaheuristics import AlgorithmId


def sphere(dim: int) -> Problem:
    """Untransformed sphere in ``dim`` variables."""
    return Problem.untransformed(BaseFunction.SPHERE, dim)


def evaluated_population(problem: Problem, n: int, seed: int = 0) -> Population:
    """Random population with every member evaluated."""
    pop = random_population(problem.space, n, RandomStream(seed).derive("population"))
    evaluate_members(pop, problem, EvaluationBudget(n))
    return pop


def sphere_population(positions: list[list[float]]) -> Population:
    """Population at ``positions`` with sphere fitness."""
    rows = np.array(positions)
    return Population.from_positions(rows, [float(np.sum(row**2)) for row in rows])


def test_default_params() -> None:
    """Defaults scale with dimension and population size."""
    ga = metaheuristics.default_params(AlgorithmId.GA, 10)
    assert isinstance(ga, metaheuristics.GAParams)
    assert ga.mutation_rate == pytest.approx(0.1)
    assert ga.tournament_size == 2
    ts = metaheuristics.default_params(AlgorithmId.TS, 10)
    assert isinstance(ts, metaheuristics.TSParams)
    assert ts.patience == 20
    cma = metaheuristics.default_params(AlgorithmId.CMAES, 10)
    assert cma == metaheuristics.CMAESParams(population_size=30, parents=15)
    assert metaheuristics.default_params(AlgorithmId.DE, 10) == metaheuristics.DEParams(0.5, 0.9)


def test_params_from_mapping() -> None:
    """Known keys override the defaults."""
    params = metaheuristics.params_from_mapping(
        AlgorithmId.DE,
        10,
        30,
        {"mutation_factor": 0.8},
    )
    assert params == metaheuristics.DEParams(mutation_factor=0.8, crossover_rate=0.9)
    assert metaheuristics.params_to_dict(params) == {
        "mutation_factor": 0.8,
        "crossover_rate": 0.9,
    }


def test_params_from_mapping_rejects_unknown_key() -> None:
    """Unknown keys are named in the error."""
    with pytest.raises(ConfigInvalidError, match="inertia"):
        metaheuristics.params_from_mapping(AlgorithmId.DE, 10, 30, {"inertia": 0.5})


def test_init_requires_evaluated_population() -> None:
    """State is only built from evaluated members."""
    problem = sphere(3)
    pop = random_population(problem.space, 5, RandomStream(0))
    with pytest.raises(UnevaluatedMemberError):
        metaheuristics.init(AlgorithmId.DE, pop, problem.space)


def test_init_checks_dimension() -> None:
    """The population dimension must match the space."""
    pop = evaluated_population(sphere(3), 5)
    with pytest.raises(DimensionMismatchError):
        metaheuristics.init(AlgorithmId.DE, pop, SearchSpace.box(4))


def test_init_copies_population() -> None:
    """The state owns its own copy of the population."""
    problem = sphere(3)
    pop = evaluated_population(problem, 5)
    state = metaheuristics.init(AlgorithmId.GA, pop, problem.space)
    state.population.members[0].fitness = -1.0
    assert pop[0].fitness != -1.0
    assert np.array_equal(state.population.positions(), pop.positions())


def test_pso_starts_at_rest() -> None:
    """Velocities start at zero with personal bests at the members."""
    problem = sphere(4)
    pop = evaluated_population(problem, 10)
    state = metaheuristics.init(AlgorithmId.PSO, pop, problem.space)
    memory = state.memory
    assert isinstance(memory, metaheuristics.SwarmMemory)
    assert not memory.velocities.any()
    assert np.array_equal(memory.personal_best, pop.positions())
    assert memory.global_best == int(np.argmin(pop.fitnesses()))


def test_cmaes_sigma_floor_on_identical_members() -> None:
    """A collapsed population still gets a usable step size."""
    problem = sphere(3)
    pop = sphere_population([[5.0, 5.0, 5.0]] * 6)
    state = metaheuristics.init(AlgorithmId.CMAES, pop, problem.space)
    memory = state.memory
    assert isinstance(memory, metaheuristics.CMAESMemory)
    assert memory.sigma == pytest.approx(1e-3 * 200.0)
    assert memory.mean.tolist() == [5.0, 5.0, 5.0]


def test_cmaes_centres_on_best_half() -> None:
    """The mean is the centroid of the better half."""
    problem = sphere(2)
    pop = sphere_population([[40.0, 0.0], [1.0, 1.0], [30.0, 0.0], [3.0, -1.0]])
    state = metaheuristics.init(AlgorithmId.CMAES, pop, problem.space)
    memory = state.memory
    assert isinstance(memory, metaheuristics.CMAESMemory)
    assert memory.mean.tolist() == [2.0, 0.0]
    assert np.array_equal(memory.covariance, np.eye(2))


def test_cmaes_params_follow_population_size() -> None:
    """Lambda and mu follow the population size."""
    problem = sphere(2)
    pop = evaluated_population(problem, 8)
    state = metaheuristics.init(AlgorithmId.CMAES, pop, problem.space)
    assert state.params == metaheuristics.CMAESParams(population_size=8, parents=4)


def test_aco_archive_holds_best_members_sorted() -> None:
    """The archive is sorted by fitness."""
    problem = sphere(3)
    pop = evaluated_population(problem, 30)
    state = metaheuristics.init(AlgorithmId.ACO, pop, problem.space)
    memory = state.memory
    assert isinstance(memory, metaheuristics.ArchiveMemory)
    assert memory.fitness.tolist() == sorted(pop.fitnesses().tolist())[:10]
    assert memory.weights[0] == memory.weights.max()


def test_sa_temperature_from_fitness_spread() -> None:
    """The start temperature comes from the fitness spread."""
    problem = sphere(3)
    pop = evaluated_population(problem, 10)
    state = metaheuristics.init(AlgorithmId.SA, pop, problem.space)
    memory = state.memory
    assert isinstance(memory, metaheuristics.AnnealingMemory)
    assert memory.temperature == pytest.approx(float(np.std(pop.fitnesses())))


def test_ts_memory_starts_empty() -> None:
    """The tabu list starts empty."""
    problem = sphere(3)
    pop = evaluated_population(problem, 6)
    state = metaheuristics.init(AlgorithmId.TS, pop, problem.space)
    memory = state.memory
    assert isinstance(memory, metaheuristics.TabuMemory)
    assert all(len(tabu) == 0 for tabu in memory.tabu)
    assert memory.chain_best.tolist() == pop.fitnesses().tolist()


@pytest.mark.parametrize("algorithm", list(AlgorithmId))
def test_step_epoch_spends_exact_quota(algorithm: AlgorithmId) -> None:
    """An epoch spends exactly its quota."""
    problem = sphere(5)
    pop = evaluated_population(problem, 30)
    state = metaheuristics.init(algorithm, pop, problem.space)
    budget = EvaluationBudget(10_000)
    before = float(pop.fitnesses().min())
    state, stats = metaheuristics.step_epoch(state, problem, budget, 300, RandomStream(1))
    assert stats.evals_used == 300
    assert budget.used == 300
    assert len(state.population) == 30
    assert state.population.evaluated
    assert stats.best_fitness <= before
    assert stats.best_fitness == stats.best_individual.fitness
    assert all(problem.space.contains(member.position) for member in state.population)


@pytest.mark.parametrize("algorithm", list(AlgorithmId))
def test_step_epoch_never_loses_the_best(algorithm: AlgorithmId) -> None:
    """The best fitness never gets worse."""
    problem = Problem.untransformed(BaseFunction.RASTRIGIN, 4)
    pop = evaluated_population(problem, 12, seed=5)
    state = metaheuristics.init(algorithm, pop, problem.space)
    budget = EvaluationBudget(10_000)
    rng = RandomStream(2)
    previous = float(pop.fitnesses().min())
    for _ in range(5):
        state, stats = metaheuristics.step_epoch(state, problem, budget, 50, rng)
        assert stats.best_fitness <= previous
        previous = stats.best_fitness
    assert budget.used == 250


def test_step_epoch_stops_at_budget() -> None:
    """An epoch ends early when the budget runs out."""
    problem = sphere(3)
    pop = evaluated_population(problem, 10)
    state = metaheuristics.init(AlgorithmId.PSO, pop, problem.space)
    budget = EvaluationBudget(25)
    state, stats = metaheuristics.step_epoch(state, problem, budget, 300, RandomStream(0))
    assert stats.evals_used == 25
    assert budget.exhausted
    with pytest.raises(BudgetExhaustedError):
        metaheuristics.step_epoch(state, problem, budget, 300, RandomStream(0))


def test_step_epoch_is_reproducible() -> None:
    """Same seed, same epoch."""
    problem = sphere(4)
    pop = evaluated_population(problem, 10)
    finals = []
    for _ in range(2):
        state = metaheuristics.init(AlgorithmId.CMAES, pop, problem.space)
        state, _ = metaheuristics.step_epoch(
            state,
            problem,
            EvaluationBudget(1000),
            200,
            RandomStream(9),
        )
        finals.append(state.population.positions())
    assert np.array_equal(finals[0], finals[1])


def test_de_generation_matches_hand_replay() -> None:
    """One DE generation replayed draw by draw."""
    problem = sphere(2)
    positions = np.array(
        [[10.0, -20.0], [30.0, 5.0], [-40.0, 15.0], [25.0, 25.0], [-5.0, -60.0]],
    )
    pop = sphere_population(positions.tolist())
    fitness = pop.fitnesses()
    state = metaheuristics.init(AlgorithmId.DE, pop, problem.space)
    state, stats = metaheuristics.step_epoch(
        state,
        problem,
        EvaluationBudget(100),
        5,
        RandomStream(7),
    )

    generator = RandomStream(7).generator
    expected = positions.copy()
    for i in range(5):
        others = np.delete(np.arange(5), i)
        r1, r2, r3 = generator.choice(others, 3, replace=False)
        mutant = positions[r1] + 0.5 * (positions[r2] - positions[r3])
        j_rand = generator.integers(0, 2)
        cross = generator.random(2) < 0.9
        cross[j_rand] = True
        trial = np.clip(np.where(cross, mutant, positions[i]), -100.0, 100.0)
        if np.sum(trial**2) <= fitness[i]:
            expected[i] = trial

    assert stats.evals_used == 5
    assert state.population.generation == 1
    np.testing.assert_allclose(state.population.positions(), expected, rtol=0, atol=1e-12)


def test_ga_generation_matches_hand_replay() -> None:
    """One GA generation replayed draw by draw."""
    problem = sphere(2)
    positions = np.array([[10.0, -20.0], [30.0, 5.0], [-4.0, 1.0], [25.0, 25.0]])
    pop = sphere_population(positions.tolist())
    fitness = pop.fitnesses()
    state = metaheuristics.init(AlgorithmId.GA, pop, problem.space)
    state, stats = metaheuristics.step_epoch(
        state,
        problem,
        EvaluationBudget(100),
        3,
        RandomStream(3),
    )

    generator = RandomStream(3).generator

    def tournament() -> int:
        """Binary tournament on the replayed stream."""
        entrants = generator.integers(0, 4, 2)
        return int(entrants[np.argmin(fitness[entrants])])

    expected = [positions[2]]
    sigma = 0.1 * np.array([200.0, 200.0])
    for _ in range(3):
        first = tournament()
        second = tournament()
        if generator.random() < 0.9:
            low = np.minimum(positions[first], positions[second])
            high = np.maximum(positions[first], positions[second])
            spread = 0.5 * (high - low)
            child = generator.uniform(low - spread, high + spread)
        else:
            child = positions[first].copy()
        mutate = generator.random(2) < 0.5
        child = child + np.where(mutate, generator.normal(0.0, sigma), 0.0)
        expected.append(np.clip(child, -100.0, 100.0))

    assert stats.evals_used == 3
    np.testing.assert_allclose(state.population.positions(), np.array(expected), atol=1e-12)
    assert state.population[0].fitness == fitness[2]


def test_sa_cools_once_per_epoch() -> None:
    """Temperature drops once per epoch, not per move."""
    problem = sphere(3)
    pop = evaluated_population(problem, 10)
    state = metaheuristics.init(AlgorithmId.SA, pop, problem.space)
    memory = state.memory
    assert isinstance(memory, metaheuristics.AnnealingMemory)
    start = memory.temperature
    metaheuristics.step_epoch(state, problem, EvaluationBudget(1000), 100, RandomStream(0))
    assert memory.temperature == pytest.approx(start * 0.95)


def test_cmaes_covariance_stays_positive_definite() -> None:
    """The covariance stays usable over many epochs."""
    problem = Problem.untransformed(BaseFunction.ROSENBROCK, 6)
    pop = evaluated_population(problem, 12)
    state = metaheuristics.init(AlgorithmId.CMAES, pop, problem.space)
    budget = EvaluationBudget(5000)
    rng = RandomStream(4)
    for _ in range(10):
        state, _ = metaheuristics.step_epoch(state, problem, budget, 120, rng)
        memory = state.memory
        assert isinstance(memory, metaheuristics.CMAESMemory)
        assert np.allclose(memory.covariance, memory.covariance.T)
        assert np.linalg.eigvalsh(memory.covariance).min() > 0
        assert 0 < memory.sigma <= 200.0


def test_repair_covariance_lifts_negative_eigenvalues() -> None:
    """Repair returns a positive definite matrix."""
    broken = np.array([[1.0, 2.0], [2.0, 1.0]])
    repaired = metaheuristics.repair_covariance(broken, 1e-6)
    assert np.allclose(repaired, repaired.T)
    assert np.linalg.eigvalsh(repaired).min() >= 1e-6 * (1 - 1e-9)


def test_inject_population_rederives_memory() -> None:
    """Injection rebuilds the algorithm memory."""
    problem = sphere(3)
    pop = evaluated_population(problem, 10)
    state = metaheuristics.init(AlgorithmId.PSO, pop, problem.space)
    state, _ = metaheuristics.step_epoch(
        state,
        problem,
        EvaluationBudget(1000),
        50,
        RandomStream(0),
    )
    incoming = evaluated_population(problem, 10, seed=8)
    injected = metaheuristics.inject_population(state, incoming)
    memory = injected.memory
    assert isinstance(memory, metaheuristics.SwarmMemory)
    assert not memory.velocities.any()
    assert np.array_equal(injected.population.positions(), incoming.positions())
    assert injected.params == state.params


def test_inject_population_checks_dimension() -> None:
    """Injected members must match the dimension."""
    problem = sphere(3)
    state = metaheuristics.init(AlgorithmId.DE, evaluated_population(problem, 5), problem.space)
    with pytest.raises(DimensionMismatchError):
        metaheuristics.inject_population(state, evaluated_population(sphere(2), 5))


class Plateau:
    """Objective that never lets a chain improve."""

    def __init__(self: Self, dim: int) -> None:
        """Initialize on the default box."""
        self.dim = dim
        self.space = SearchSpace.box(dim)

    def __call__(self: Self, x: Vector) -> float:  # noqa: ARG002
        """Return the constant."""
        return 5.0


def test_ts_step_halves_when_chains_stall_and_resets_on_injection() -> None:
    """Idle chains shrink their step down to the floor; injection restores it."""
    problem = Plateau(2)
    pop = Population.from_positions(np.zeros((4, 2)), [5.0] * 4)
    params = metaheuristics.TSParams(patience=1, min_step=0.03)
    state = metaheuristics.init(AlgorithmId.TS, pop, problem.space, params)
    metaheuristics.step_epoch(state, problem, EvaluationBudget(1000), 64, RandomStream(0))
    memory = state.memory
    assert isinstance(memory, metaheuristics.TabuMemory)
    assert memory.steps.tolist() == [0.03] * 4
    injected = metaheuristics.inject_population(state, pop)
    fresh = injected.memory
    assert isinstance(fresh, metaheuristics.TabuMemory)
    assert fresh.steps.tolist() == [0.05] * 4
