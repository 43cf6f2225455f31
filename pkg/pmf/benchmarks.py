"""Shifted and rotated benchmark functions on ``[-100, 100]^dim``.

Each problem evaluates ``f(x) = base(scale * M (x - o) + c) + bias`` where
``o`` is the shift, ``M`` an orthonormal rotation, ``scale`` maps the box
onto the base function's canonical domain and ``c`` moves the canonical
optimum (the ones vector for rosenbrock, the origin otherwise) onto ``o``.
"""

import enum
import math
from collections.abc import Callable
from collections.abc import Mapping
from dataclasses import dataclass
from dataclasses import field
from typing import Any
from typing import Self

import numpy as np

from pmf.core import PmfError
from pmf.core import RandomStream
from pmf.core import SearchSpace
from pmf.core import Vector

DOMAIN = 100.0
F1_BIAS = 300.0
F1_NAME = "f1_2022_like"


class BaseFunction(enum.StrEnum):
    """Canonical test functions, all with global minimum 0."""

    SPHERE = "sphere"
    RASTRIGIN = "rastrigin"
    ROSENBROCK = "rosenbrock"
    ACKLEY = "ackley"
    GRIEWANK = "griewank"
    ZAKHAROV = "zakharov"


class UnknownFunctionError(PmfError):
    """A function name is not part of the benchmark suite."""


def _sphere(z: Vector) -> float:
    return float(np.sum(z**2))


def _rastrigin(z: Vector) -> float:
    return float(10.0 * z.size + np.sum(z**2 - 10.0 * np.cos(2.0 * np.pi * z)))


def _rosenbrock(z: Vector) -> float:
    head, tail = z[:-1], z[1:]
    return float(np.sum(100.0 * (tail - head**2) ** 2 + (1.0 - head) ** 2))


def _ackley(z: Vector) -> float:
    root_mean_square = np.sqrt(np.mean(z**2))
    mean_cos = np.mean(np.cos(2.0 * np.pi * z))
    value = -20.0 * np.exp(-0.2 * root_mean_square) - np.exp(mean_cos) + 20.0 + math.e
    return max(0.0, float(value))


def _griewank(z: Vector) -> float:
    index = np.arange(1, z.size + 1)
    return float(1.0 + np.sum(z**2) / 4000.0 - np.prod(np.cos(z / np.sqrt(index))))


def _zakharov(z: Vector) -> float:
    weighted = float(np.sum(0.5 * np.arange(1, z.size + 1) * z))
    return float(np.sum(z**2)) + weighted**2 + weighted**4


_BASE: Mapping[BaseFunction, Callable[[Vector], float]] = {
    BaseFunction.SPHERE: _sphere,
    BaseFunction.RASTRIGIN: _rastrigin,
    BaseFunction.ROSENBROCK: _rosenbrock,
    BaseFunction.ACKLEY: _ackley,
    BaseFunction.GRIEWANK: _griewank,
    BaseFunction.ZAKHAROV: _zakharov,
}

# canonical half-width of each function's domain, mapped onto [-100, 100]
_CANONICAL_DOMAIN: Mapping[BaseFunction, float] = {
    BaseFunction.SPHERE: DOMAIN,
    BaseFunction.RASTRIGIN: 5.12,
    BaseFunction.ROSENBROCK: 5.0,
    BaseFunction.ACKLEY: DOMAIN,
    BaseFunction.GRIEWANK: 600.0,
    BaseFunction.ZAKHAROV: DOMAIN,
}


def eval_base(kind: BaseFunction, z: Vector) -> float:
    """Evaluate the untransformed base function at ``z``."""
    point = np.asarray(z, dtype=np.float64)
    if point.size == 0:
        message = "Cannot evaluate a base function on an empty vector."
        raise PmfError(message)
    return _BASE[kind](point)


def canonical_optimum(kind: BaseFunction, dim: int) -> Vector:
    """Location of the base function's global minimum."""
    if kind is BaseFunction.ROSENBROCK:
        return np.ones(dim)
    return np.zeros(dim)


def random_rotation(dim: int, rng: RandomStream) -> Vector:
    """Orthonormalize a seeded Gaussian matrix (QR with a positive R diagonal)."""
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.asarray(q * signs, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Problem:
    """An immutable transformed benchmark problem.

    ``offset`` moves the origin to the base optimum; empty means zeros.
    """

    base: BaseFunction
    shift: Vector
    rotation: Vector
    bias: float
    space: SearchSpace
    scale: float = 1.0
    offset: Vector = field(default_factory=lambda: np.zeros(0))
    name: str = ""

    def __post_init__(self: Self) -> None:
        """Freeze the arrays."""
        for attr in ("shift", "rotation"):
            array = np.array(getattr(self, attr), dtype=np.float64)
            array.setflags(write=False)
            object.__setattr__(self, attr, array)
        offset = self.offset if np.size(self.offset) else np.zeros(self.dim)
        frozen = np.array(offset, dtype=np.float64)
        frozen.setflags(write=False)
        object.__setattr__(self, "offset", frozen)
        if not self.name:
            object.__setattr__(self, "name", str(self.base))

    @property
    def dim(self: Self) -> int:
        """Number of decision variables."""
        return self.space.dim

    def transform(self: Self, x: Vector) -> Vector:
        """Map a point of the box into the base function's coordinates."""
        z = self.rotation @ (self.scale * (np.asarray(x, dtype=np.float64) - self.shift))
        return z + self.offset

    def __call__(self: Self, x: Vector) -> float:
        """Evaluate the problem at ``x``."""
        return eval_base(self.base, self.transform(x)) + self.bias

    @classmethod
    def untransformed(cls: type[Self], base: BaseFunction, dim: int) -> Self:
        """The raw base function on ``[-100, 100]^dim``, no shift, rotation or bias."""
        return cls(
            base=base,
            shift=np.zeros(dim),
            rotation=np.eye(dim),
            bias=0.0,
            space=SearchSpace.box(dim, -DOMAIN, DOMAIN),
        )


def make_problem(
    base: BaseFunction,
    dim: int,
    seed: int,
    bias: float = 0.0,
    *,
    name: str = "",
) -> Problem:
    """Build a shifted, rotated, biased instance of ``base``.

    The shift is drawn uniformly in the central 80% of the box; the
    rotation is a seeded random orthonormal matrix.
    """
    if dim < 1:
        message = f"Dimension must be at least 1, got {dim}."
        raise PmfError(message)
    space = SearchSpace.box(dim, -DOMAIN, DOMAIN)
    rng = RandomStream(seed).derive(f"problem:{base}")
    margin = 0.1 * space.width
    shift = rng.uniform(space.lower + margin, space.upper - margin, dim)
    rotation = random_rotation(dim, rng)
    return Problem(
        base=base,
        shift=shift,
        rotation=rotation,
        bias=bias,
        space=space,
        scale=_CANONICAL_DOMAIN[base] / DOMAIN,
        offset=canonical_optimum(base, dim),
        name=name,
    )


def f1_2022_like(dim: int, seed: int, bias: float = F1_BIAS) -> Problem:
    """Shifted, fully rotated zakharov with bias 300 (an "F1-like" problem)."""
    if dim < 2:  # noqa: PLR2004
        message = f"The F1-like problem needs at least 2 dimensions, got {dim}."
        raise PmfError(message)
    return make_problem(BaseFunction.ZAKHAROV, dim, seed, bias, name=F1_NAME)


SUITE: tuple[str, ...] = (*(str(kind) for kind in BaseFunction), F1_NAME)


def default_bias(name: str) -> float:
    """Bias used for a suite function when none is configured."""
    return F1_BIAS if name == F1_NAME else 0.0


@dataclass(frozen=True)
class ProblemDescriptor:
    """JSON-serializable recipe for a problem; runs replay from it alone."""

    function: str = F1_NAME
    dim: int = 10
    seed: int = 0
    bias: float | None = None

    def __post_init__(self: Self) -> None:
        """Check the function name against the suite."""
        if self.function not in SUITE:
            message = (
                f"Unknown function '{self.function}', expected one of "
                f"{', '.join(SUITE)}."
            )
            raise UnknownFunctionError(message)

    def build(self: Self) -> Problem:
        """Construct the described problem."""
        bias = default_bias(self.function) if self.bias is None else self.bias
        if self.function == F1_NAME:
            return f1_2022_like(self.dim, self.seed, bias)
        return make_problem(BaseFunction(self.function), self.dim, self.seed, bias)

    def to_dict(self: Self) -> dict[str, Any]:
        """Serialize to plain JSON types."""
        return {
            "function": self.function,
            "dim": self.dim,
            "seed": self.seed,
            "bias": default_bias(self.function) if self.bias is None else self.bias,
        }

    @classmethod
    def from_dict(cls: type[Self], data: Mapping[str, Any]) -> Self:
        """Rebuild a descriptor from :meth:`to_dict` output."""
        bias = data.get("bias")
        return cls(
            function=str(data["function"]),
            dim=int(data["dim"]),
            seed=int(data["seed"]),
            bias=None if bias is None else float(bias),
        )
