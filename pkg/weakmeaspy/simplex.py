"""The classical state space: probability vectors with the normalized Hadamard group product."""
import json
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .weakmeasclasses import SIMPLEX_TOL, UNDERFLOW_FLOOR
from .weakmeaserror import DimensionMismatchError, InvariantViolation, SimplexDomainError


@dataclass(frozen=True, eq=False)
class SimplexPoint:
    """A point of the closed simplex. Components are copied into a read-only float array."""
    components: np.ndarray

    def __post_init__(self):
        v = np.array(self.components, dtype=float)
        if v.ndim != 1 or v.size < 2:
            raise SimplexDomainError(f"a simplex point needs at least 2 components, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise SimplexDomainError("simplex components must be finite", response=v)
        if np.any(v < -SIMPLEX_TOL) or np.any(v > 1.0 + SIMPLEX_TOL):
            raise SimplexDomainError(f"simplex components must lie in [0, 1], got {v.tolist()}", response=v)
        total = float(v.sum())
        if abs(total - 1.0) > SIMPLEX_TOL:
            raise SimplexDomainError(f"simplex components sum to {total!r}, not 1", response=v)
        v = np.clip(v, 0.0, 1.0)
        v.flags.writeable = False
        object.__setattr__(self, "components", v)

    @classmethod
    def from_unnormalized(cls, weights: Sequence[float] | np.ndarray) -> "SimplexPoint":
        w = np.asarray(weights, dtype=float)
        if np.any(w < 0):
            raise SimplexDomainError("weights must be non-negative", response=w)
        total = w.sum()
        if not total > 0:
            raise SimplexDomainError("weights sum to zero", response=w)
        return cls(w / total)

    @property
    def n(self) -> int:
        return int(self.components.size)

    @property
    def is_interior(self) -> bool:
        return bool(np.all(self.components > UNDERFLOW_FLOOR) and np.all(self.components < 1.0))

    @property
    def underflowed(self) -> bool:
        """Some component is positive in exact arithmetic but stored below the underflow floor."""
        return bool(np.any(self.components <= UNDERFLOW_FLOOR)) and not self.is_vertex

    @property
    def is_vertex(self) -> bool:
        return bool(self.components.max() >= 1.0 - SIMPLEX_TOL)

    def allclose(self, other: "SimplexPoint", atol: float = SIMPLEX_TOL) -> bool:
        return self.n == other.n and bool(np.allclose(self.components, other.components, rtol=0.0, atol=atol))

    def __eq__(self, other):
        if not isinstance(other, SimplexPoint):
            return NotImplemented
        return np.array_equal(self.components, other.components)

    def __hash__(self):
        return hash(self.components.tobytes())

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[float]:
        return iter(self.components.tolist())

    def __getitem__(self, index):
        return self.components[index]

    def __array__(self, dtype=None, copy=None):
        return np.array(self.components, dtype=dtype)

    def __repr__(self):
        return f"SimplexPoint({self.components.tolist()})"

    def to_json(self) -> str:
        return json.dumps(self.components.tolist())

    @classmethod
    def from_json(cls, text: str) -> "SimplexPoint":
        return cls(np.asarray(json.loads(text), dtype=float))


def _check_same_dimension(x: SimplexPoint, y: SimplexPoint) -> None:
    if x.n != y.n:
        raise DimensionMismatchError(f"simplex dimensions differ: {x.n} and {y.n}", response=(x.n, y.n))


def hadamard(x, y) -> np.ndarray:
    return np.asarray(x, dtype=float) * np.asarray(y, dtype=float)


def trace(v) -> float:
    return float(np.sum(np.asarray(v, dtype=float)))


def star(x: SimplexPoint, y: SimplexPoint) -> SimplexPoint:
    """(x * y)^i = x^i y^i / sum_k x^k y^k. Closure points are accepted while the normalizer is positive."""
    _check_same_dimension(x, y)
    product = hadamard(x.components, y.components)
    normalizer = product.sum()
    if not normalizer > 0.0:
        if x.is_interior and y.is_interior:
            raise InvariantViolation("zero normalizer in star product of interior points", response=(x, y))
        raise SimplexDomainError("star product of points with disjoint supports", response=(x, y))
    return SimplexPoint(product / normalizer)


def inverse(x: SimplexPoint) -> SimplexPoint:
    if not x.is_interior:
        raise SimplexDomainError(f"{x!r} lies on the boundary and has no inverse", response=x)
    reciprocal = 1.0 / x.components
    return SimplexPoint(reciprocal / reciprocal.sum())


def identity(n: int) -> SimplexPoint:
    if n < 2:
        raise SimplexDomainError(f"simplex dimension must be at least 2, got {n}", response=n)
    return SimplexPoint(np.full(n, 1.0 / n))


def vertex(n: int, k: int) -> SimplexPoint:
    """Vertex with components delta_k^i; k is a zero-based outcome index."""
    if n < 2:
        raise SimplexDomainError(f"simplex dimension must be at least 2, got {n}", response=n)
    if not 0 <= k < n:
        raise SimplexDomainError(f"vertex index {k} outside 0..{n - 1}", response=k)
    v = np.zeros(n)
    v[k] = 1.0
    return SimplexPoint(v)


def permute(x: SimplexPoint, sigma: Sequence[int]) -> SimplexPoint:
    """(sigma x)^i = x^{sigma(i)}."""
    sigma = np.asarray(sigma, dtype=int)
    if sorted(sigma.tolist()) != list(range(x.n)):
        raise SimplexDomainError(f"{sigma.tolist()} is not a permutation of 0..{x.n - 1}", response=sigma)
    return SimplexPoint(x.components[sigma])


@dataclass(frozen=True)
class FundamentalSteps:
    """n interior points averaging to the identity; one per outcome of a weak measurement."""
    steps: tuple[SimplexPoint, ...]
    strength: float | None = None

    def __post_init__(self):
        steps = tuple(self.steps)
        object.__setattr__(self, "steps", steps)
        n = len(steps)
        if n < 2:
            raise SimplexDomainError(f"need at least 2 fundamental steps, got {n}", response=n)
        for k, step in enumerate(steps):
            if step.n != n:
                raise DimensionMismatchError(f"step {k} has dimension {step.n}, expected {n}", response=k)
            if not step.is_interior:
                raise SimplexDomainError(f"step {k} = {step!r} is not interior", response=k)
        residual = np.abs(self.matrix.sum(axis=0) - 1.0).max()
        if residual > SIMPLEX_TOL:
            raise SimplexDomainError(f"fundamental steps do not sum to n*e (max deviation {residual:.3e})",
                                     response=residual)

    @classmethod
    def custom(cls, steps: Sequence[Sequence[float] | SimplexPoint]) -> "FundamentalSteps":
        return cls(tuple(s if isinstance(s, SimplexPoint) else SimplexPoint(s) for s in steps))

    @property
    def n(self) -> int:
        return len(self.steps)

    @property
    def matrix(self) -> np.ndarray:
        """Row k holds x_(k)."""
        return np.vstack([s.components for s in self.steps])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, k: int) -> SimplexPoint:
        return self.steps[k]


def build_fundamental_steps(n: int, strength: float) -> FundamentalSteps:
    """Symmetric rays x_(k) = e + strength * (v_(k) - e)."""
    if n < 2:
        raise SimplexDomainError(f"simplex dimension must be at least 2, got {n}", response=n)
    if not 0.0 < strength < 1.0:
        raise SimplexDomainError(f"step strength must lie in (0, 1), got {strength}", response=strength)
    e = np.full(n, 1.0 / n)
    rows = e[None, :] + strength * (np.eye(n) - e[None, :])
    return FundamentalSteps(tuple(SimplexPoint(row) for row in rows), strength=strength)
