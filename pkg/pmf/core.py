"""Shared domain types for the polymorphic metaheuristic framework.

Everything that moves between algorithms lives here: the bounded search
space, candidate solutions with their cached fitness, the evaluation
budget and the seeded random streams.
Fitness is always minimised.
"""

import logging
import threading
import zlib
from collections.abc import Iterable
from collections.abc import Iterator
from collections.abc import Sequence
from dataclasses import dataclass
from dataclasses import field
from typing import Protocol
from typing import Self

import numpy as np
import numpy.typing as npt

logger = logging.getLogger(__name__)

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]

MAX_SEED = 2**64


class PmfError(Exception):
    """Base class for exceptions in this package."""

    def __init__(self: Self, message: str, exit_code: int = 1) -> None:
        """Initialize the exception with a message and an optional exit code."""
        self.message = message
        self.exit_code = exit_code
        super().__init__(message)


class BudgetExhaustedError(PmfError):
    """No objective evaluation is left in the budget."""


class DimensionMismatchError(PmfError):
    """A vector or population does not match the expected dimension."""


class UnevaluatedMemberError(PmfError):
    """An operation needs fitness values that have not been computed."""


class InvalidSearchSpaceError(PmfError):
    """The box bounds violate ``lower < upper``."""


class ConfigInvalidError(PmfError):
    """A configuration value is missing, unknown or out of range."""


class Objective(Protocol):
    """Anything that can be minimised over a box."""

    @property
    def dim(self: Self) -> int:
        """Number of decision variables."""
        ...  # pragma: no cover

    @property
    def space(self: Self) -> "SearchSpace":
        """The box the objective is defined on."""
        ...  # pragma: no cover

    def __call__(self: Self, x: Vector) -> float:
        """Return the objective value at ``x``."""
        ...  # pragma: no cover


def _frozen(values: npt.ArrayLike) -> Vector:
    array = np.array(values, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SearchSpace:
    """An axis-aligned box ``[lower, upper]``."""

    lower: Vector
    upper: Vector

    def __post_init__(self: Self) -> None:
        """Freeze the bounds and check the box is not degenerate."""
        lower = _frozen(self.lower)
        upper = _frozen(self.upper)
        if lower.ndim != 1 or lower.shape != upper.shape or lower.size < 1:
            message = (
                f"Bounds must be two vectors of equal length >= 1, "
                f"got shapes {lower.shape} and {upper.shape}."
            )
            raise InvalidSearchSpaceError(message)
        if not np.all(lower < upper):
            message = "Every lower bound must be strictly below its upper bound."
            raise InvalidSearchSpaceError(message)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def box(cls: type[Self], dim: int, low: float = -100.0, high: float = 100.0) -> Self:
        """Create the hypercube ``[low, high]^dim``."""
        if dim < 1:
            message = f"Dimension must be at least 1, got {dim}."
            raise InvalidSearchSpaceError(message)
        return cls(np.full(dim, low), np.full(dim, high))

    @property
    def dim(self: Self) -> int:
        """Number of decision variables."""
        return int(self.lower.size)

    @property
    def width(self: Self) -> Vector:
        """Per-coordinate extent ``upper - lower``."""
        return self.upper - self.lower

    @property
    def diagonal(self: Self) -> float:
        """Euclidean length of the box diagonal."""
        return float(np.linalg.norm(self.width))

    def clip(self: Self, x: npt.ArrayLike) -> Vector:
        """Project points (a vector or a row matrix) onto the box."""
        return np.clip(np.asarray(x, dtype=np.float64), self.lower, self.upper)

    def contains(self: Self, x: npt.ArrayLike) -> bool:
        """Check that every coordinate lies inside the bounds."""
        point = np.asarray(x, dtype=np.float64)
        return bool(np.all(point >= self.lower) and np.all(point <= self.upper))

    def __repr__(self: Self) -> str:
        """Create a string (c)representation for SearchSpace."""
        return (
            f"{self.__class__.__module__}.{self.__class__.__name__}("
            f"lower={self.lower.tolist()!r}, "
            f"upper={self.upper.tolist()!r}, "
            ")"
        )


class Individual:
    """A candidate solution with a cached objective value.

    The position is read-only; assigning a new position clears the cached
    fitness so that re-evaluation is always an explicit, metered act.
    """

    __slots__ = ("_position", "fitness")

    def __init__(self: Self, position: npt.ArrayLike, fitness: float | None = None) -> None:
        """Initialize the individual from a position vector."""
        self._position = _frozen(position)
        self.fitness = fitness

    @property
    def position(self: Self) -> Vector:
        """The decision variables."""
        return self._position

    @position.setter
    def position(self: Self, value: npt.ArrayLike) -> None:
        self._position = _frozen(value)
        self.fitness = None

    @property
    def dim(self: Self) -> int:
        """Length of the position vector."""
        return int(self._position.size)

    @property
    def evaluated(self: Self) -> bool:
        """Whether a fitness value is cached."""
        return self.fitness is not None

    def copy(self: Self) -> "Individual":
        """Return an independent copy, fitness included."""
        return Individual(self._position, self.fitness)

    def __repr__(self: Self) -> str:
        """Create a string (c)representation for Individual."""
        return (
            f"{self.__class__.__module__}.{self.__class__.__name__}("
            f"position={self._position.tolist()!r}, "
            f"fitness={self.fitness!r}, "
            ")"
        )


@dataclass
class Population:
    """An ordered set of candidate solutions sharing one dimension."""

    members: list[Individual]
    generation: int = 0

    def __post_init__(self: Self) -> None:
        """Check that all members share one dimension."""
        dims = {member.dim for member in self.members}
        if len(dims) > 1:
            message = f"Population members have mixed dimensions {sorted(dims)}."
            raise DimensionMismatchError(message)

    @classmethod
    def from_positions(
        cls: type[Self],
        positions: npt.ArrayLike,
        fitness: Sequence[float | None] | None = None,
        generation: int = 0,
    ) -> Self:
        """Build a population from a row matrix of positions."""
        rows = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        values: Sequence[float | None] = (
            fitness if fitness is not None else [None] * len(rows)
        )
        return cls(
            [Individual(row, value) for row, value in zip(rows, values, strict=True)],
            generation,
        )

    def __len__(self: Self) -> int:
        """Return the number of members."""
        return len(self.members)

    def __iter__(self: Self) -> Iterator[Individual]:
        """Iterate over the members in order."""
        return iter(self.members)

    def __getitem__(self: Self, index: int) -> Individual:
        """Return the member at ``index``."""
        return self.members[index]

    @property
    def dim(self: Self) -> int:
        """Dimension shared by all members (0 when empty)."""
        return self.members[0].dim if self.members else 0

    @property
    def evaluated(self: Self) -> bool:
        """Whether every member carries a fitness value."""
        return all(member.evaluated for member in self.members)

    def positions(self: Self) -> Matrix:
        """Return the positions as an ``(n, dim)`` matrix."""
        if not self.members:
            return np.empty((0, 0))
        return np.vstack([member.position for member in self.members])

    def fitnesses(self: Self) -> Vector:
        """Return the fitness values, failing if any member is unevaluated."""
        if not self.evaluated:
            missing = sum(1 for member in self.members if not member.evaluated)
            message = f"{missing} of {len(self.members)} members have no fitness."
            raise UnevaluatedMemberError(message)
        return np.array([member.fitness for member in self.members], dtype=np.float64)

    def copy(self: Self) -> "Population":
        """Return a deep copy of the members."""
        return Population([member.copy() for member in self.members], self.generation)


@dataclass
class EvaluationBudget:
    """Counts objective evaluations against a hard ceiling."""

    max_evals: int
    used: int = 0
    _lock: threading.Lock = field(
        default_factory=threading.Lock,
        repr=False,
        compare=False,
    )

    def __post_init__(self: Self) -> None:
        """Validate the ceiling."""
        if self.max_evals < 1:
            message = f"max_evals must be positive, got {self.max_evals}."
            raise PmfError(message)

    @property
    def remaining(self: Self) -> int:
        """Evaluations still available."""
        return self.max_evals - self.used

    @property
    def exhausted(self: Self) -> bool:
        """Whether the ceiling has been reached."""
        return self.used >= self.max_evals

    @property
    def fraction(self: Self) -> float:
        """Share of the budget spent, in ``[0, 1]``."""
        return self.used / self.max_evals

    def charge(self: Self) -> None:
        """Account for exactly one evaluation."""
        with self._lock:
            if self.used >= self.max_evals:
                message = f"Evaluation budget of {self.max_evals} is exhausted."
                raise BudgetExhaustedError(message)
            self.used += 1


class RandomStream:
    """A seeded numpy generator that can derive independent sub-streams.

    A sub-stream is identified by the root seed and a path of string tags,
    so adding draws to one consumer never shifts the draws of another.
    """

    def __init__(self: Self, seed: int, path: tuple[int, ...] = ()) -> None:
        """Initialize the stream from a 64-bit unsigned seed."""
        if not 0 <= seed < MAX_SEED:
            message = f"Seed must be a 64-bit unsigned integer, got {seed}."
            raise PmfError(message)
        self.seed = seed
        self.path = path
        sequence = np.random.SeedSequence(seed, spawn_key=path)
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def derive(self: Self, tag: str) -> "RandomStream":
        """Return the sub-stream named ``tag``."""
        return RandomStream(self.seed, (*self.path, zlib.crc32(tag.encode("utf-8"))))

    def random(self: Self, size: int | tuple[int, ...] | None = None) -> Vector:
        """Uniform draws from ``[0, 1)``."""
        return np.asarray(self.generator.random(size), dtype=np.float64)

    def uniform(
        self: Self,
        low: npt.ArrayLike,
        high: npt.ArrayLike,
        size: int | tuple[int, ...] | None = None,
    ) -> Vector:
        """Uniform draws from ``[low, high)``."""
        return np.asarray(self.generator.uniform(low, high, size), dtype=np.float64)

    def normal(
        self: Self,
        loc: npt.ArrayLike = 0.0,
        scale: npt.ArrayLike = 1.0,
        size: int | tuple[int, ...] | None = None,
    ) -> Vector:
        """Gaussian draws."""
        return np.asarray(self.generator.normal(loc, scale, size), dtype=np.float64)

    def integers(self: Self, high: int, size: int | None = None) -> npt.NDArray[np.int64]:
        """Integers from ``[0, high)``."""
        return np.asarray(self.generator.integers(0, high, size), dtype=np.int64)

    def choice(
        self: Self,
        options: int | npt.ArrayLike,
        size: int,
        *,
        replace: bool = True,
        p: npt.ArrayLike | None = None,
    ) -> npt.NDArray[np.int64]:
        """Draw ``size`` entries of ``options`` (or of ``range(options)``)."""
        return np.asarray(
            self.generator.choice(options, size, replace=replace, p=p),
            dtype=np.int64,
        )

    def __repr__(self: Self) -> str:
        """Create a string (c)representation for RandomStream."""
        return (
            f"{self.__class__.__module__}.{self.__class__.__name__}("
            f"seed={self.seed!r}, "
            f"path={self.path!r}, "
            ")"
        )


def evaluate(ind: Individual, objective: Objective, budget: EvaluationBudget) -> float:
    """Evaluate one individual, cache its fitness and charge the budget.

    Args:
    ----
        ind (Individual): The candidate to evaluate.
        objective (Objective): The function being minimised.
        budget (EvaluationBudget): The budget charged for the call.

    Returns:
    -------
        float: The objective value, also stored on ``ind.fitness``.

    Raises:
    ------
        BudgetExhaustedError: if no evaluation is left.
        DimensionMismatchError: if the position length differs from the objective.

    """
    if ind.dim != objective.dim:
        message = f"Position has {ind.dim} coordinates, objective expects {objective.dim}."
        raise DimensionMismatchError(message)
    if budget.exhausted:
        message = f"Evaluation budget of {budget.max_evals} is exhausted."
        raise BudgetExhaustedError(message)
    value = float(objective(ind.position))
    budget.charge()
    ind.fitness = value
    return value


def evaluate_members(
    members: Iterable[Individual],
    objective: Objective,
    budget: EvaluationBudget,
    *,
    only_missing: bool = False,
) -> int:
    """Evaluate members in order and return how many evaluations were charged.

    Progress made before a ``BudgetExhaustedError`` is kept.
    """
    count = 0
    for member in members:
        if only_missing and member.evaluated:
            continue
        evaluate(member, objective, budget)
        count += 1
    return count


def clamp(ind: Individual, space: SearchSpace) -> Individual:
    """Project an individual onto the box.

    In-bounds individuals come back unchanged, cached fitness included.
    """
    if ind.dim != space.dim:
        message = f"Position has {ind.dim} coordinates, space has {space.dim}."
        raise DimensionMismatchError(message)
    clipped = space.clip(ind.position)
    if np.array_equal(clipped, ind.position):
        return ind.copy()
    return Individual(clipped)


def random_population(space: SearchSpace, n: int, rng: RandomStream) -> Population:
    """Sample ``n`` unevaluated individuals uniformly in the box."""
    if n < 1:
        message = f"Population size must be at least 1, got {n}."
        raise PmfError(message)
    positions = rng.uniform(space.lower, space.upper, (n, space.dim))
    return Population.from_positions(positions)


def best_index(pop: Population) -> int:
    """Index of the member with minimal fitness, first occurrence on ties."""
    return int(np.argmin(pop.fitnesses()))


def best_of(pop: Population) -> Individual:
    """Return the member with minimal fitness (lowest index on ties)."""
    return pop.members[best_index(pop)]
