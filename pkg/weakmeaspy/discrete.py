"""Discrete decomposition of a projective measurement into repeated weak measurements.

The classical coordinate x is carried in the log domain: each outcome k adds log x_(k) and the
vector is re-centred by its maximum, so long chains never underflow before collapse is detected.
Outcomes are drawn from the closed-form conditional law Tr(x o p0 o x_(k)) / Tr(x o p0); the
operator path (propagate_state, matrix_outcome_probabilities) is kept as the cross-check.
"""
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .logger import Logger
from .operators import KrausSet, QuantumState, apply_and_normalize
from .simplex import FundamentalSteps, SimplexPoint, build_fundamental_steps, inverse, star
from .weakmeasclasses import BORN_FLOOR, DEFAULT_MAX_STEPS, FACTOR_TOL, NOISE_CHUNK, TRAJECTORY_FORMAT, \
    FORMAT_VERSION
from .weakmeaserror import DimensionMismatchError, InvariantViolation, NotProjectiveError, PersistenceError, \
    SimplexDomainError

logger = Logger(__name__).get_logger()


@dataclass(frozen=True, eq=False)
class WeakOperatorSet:
    """N_(k) = sum_i sqrt(x_(k)^i) P_i for fundamental steps x_(k) and projectors P_i."""
    operators: np.ndarray
    steps: FundamentalSteps
    projectors: KrausSet

    @property
    def n(self) -> int:
        return self.steps.n

    @property
    def kraus(self) -> KrausSet:
        return KrausSet(self.operators)


def weak_operators(steps: FundamentalSteps, projectors: KrausSet) -> WeakOperatorSet:
    if not projectors.is_projective:
        raise NotProjectiveError("weak operators are built from a projective measurement; "
                                 "the given operators are not orthogonal projectors")
    if steps.n != projectors.n:
        raise DimensionMismatchError(f"{steps.n} fundamental steps for {projectors.n} projectors",
                                     response=(steps.n, projectors.n))
    ops = np.einsum("ki,ide->kde", np.sqrt(steps.matrix), projectors.operators)
    KrausSet(ops)  # completeness follows from sum_k x_(k) = n e
    return WeakOperatorSet(operators=ops, steps=steps, projectors=projectors)


def collapse_states(psi0: QuantumState, projectors: KrausSet) -> tuple[tuple[QuantumState | None, ...], SimplexPoint]:
    """Post-measurement states P_i|psi0>/sqrt(p_i) (None for impossible outcomes) and p0."""
    p0 = projectors.born_probabilities(psi0)
    states = []
    for j, p in enumerate(projectors.operators):
        if p0[j] <= BORN_FLOOR:
            states.append(None)
            p0[j] = 0.0
        else:
            states.append(apply_and_normalize(p, psi0)[0])
    return tuple(states), SimplexPoint.from_unnormalized(p0)


def conditional_probabilities(x: SimplexPoint, p0: SimplexPoint, steps: FundamentalSteps) -> np.ndarray:
    if not x.is_interior:
        raise SimplexDomainError(f"{x!r} has underflowed to the boundary", response=x)
    if x.n != p0.n or x.n != steps.n:
        raise DimensionMismatchError(f"dimensions differ: x {x.n}, p0 {p0.n}, steps {steps.n}")
    return _conditional_rows(x.components[None, :] * p0.components[None, :], steps.matrix)[0]


def _rowdot(rows: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """rows @ matrix.T as an explicit row reduction, so every row is summed the same way whatever the batch."""
    return (rows[:, None, :] * matrix[None, :, :]).sum(axis=2)


def _conditional_rows(weights: np.ndarray, step_matrix: np.ndarray) -> np.ndarray:
    return _rowdot(weights, step_matrix) / weights.sum(axis=1, keepdims=True)


def _draw_outcomes(probabilities: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    cumulative = np.cumsum(probabilities, axis=1)
    k = (uniforms[:, None] >= cumulative).sum(axis=1)
    return np.minimum(k, probabilities.shape[1] - 1)


def sample_step(x: SimplexPoint, weak_set: WeakOperatorSet, p0: SimplexPoint,
                rng: np.random.Generator) -> tuple[int, SimplexPoint]:
    probabilities = conditional_probabilities(x, p0, weak_set.steps)
    k = int(_draw_outcomes(probabilities[None, :], np.array([rng.random()]))[0])
    return k, star(x, weak_set.steps[k])


def matrix_outcome_probabilities(state: QuantumState, weak_set: WeakOperatorSet) -> np.ndarray:
    """<psi|N_(k)^dag N_(k)|psi>, the operator-path version of the conditional law."""
    return weak_set.kraus.born_probabilities(state)


def reconstruct_state(x: SimplexPoint, p0: SimplexPoint,
                      collapse: Sequence[QuantumState | None]) -> QuantumState:
    """|psi> = sum_i sqrt(x^i p_i / sum_l x^l p_l) |psi_i>."""
    if len(collapse) != x.n or p0.n != x.n:
        raise DimensionMismatchError(f"{len(collapse)} collapse states for a {x.n}-point simplex")
    weights = x.components * p0.components
    total = weights.sum()
    if not total > 0:
        raise SimplexDomainError("x o p0 vanishes; no state corresponds to this point", response=x)
    amplitudes = np.sqrt(weights / total)
    vector = None
    for amplitude, state in zip(amplitudes, collapse):
        if amplitude == 0.0 or state is None:
            continue
        vector = amplitude * state.vector if vector is None else vector + amplitude * state.vector
    return QuantumState.pure(vector, normalize=True)


def propagate_state(psi0: QuantumState, weak_set: WeakOperatorSet, outcomes: Sequence[int]) -> list[QuantumState]:
    """States after each outcome, by applying N_(k) and renormalizing."""
    states = [psi0]
    for k in outcomes:
        states.append(apply_and_normalize(weak_set.operators[k], states[-1])[0])
    return states


def tilde_from_outcomes(outcomes: Sequence[int], steps: FundamentalSteps, p0: SimplexPoint) -> SimplexPoint:
    """x~_s^i = x_(k_s)^i ... x_(k_1)^i p_i / p_{k_s...k_1}, evaluated in the log domain."""
    with np.errstate(divide="ignore"):
        log_weights = np.log(p0.components) + np.log(steps.matrix)[list(outcomes)].sum(axis=0)
    return SimplexPoint(_softmax(log_weights[None, :])[0])


def recover_outcomes(xs: Sequence[SimplexPoint], steps: FundamentalSteps, atol: float = FACTOR_TOL) -> list[int]:
    """Read the outcome sequence back off a chain through x_s * x_{s-1}^-1."""
    outcomes = []
    for previous, current in zip(xs[:-1], xs[1:]):
        quotient = star(current, inverse(previous)).components
        distances = np.abs(steps.matrix - quotient[None, :]).max(axis=1)
        k = int(distances.argmin())
        if distances[k] > atol:
            raise InvariantViolation(f"{current!r} is not a fundamental step away from {previous!r}",
                                     response=distances[k])
        outcomes.append(k)
    return outcomes


def _softmax(logs: np.ndarray) -> np.ndarray:
    shifted = np.exp(logs - logs.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class ChainRecord:
    outcomes: tuple[int, ...]
    xs: np.ndarray
    terminal_outcome: int | None
    steps_taken: int
    p0: SimplexPoint
    seed: int | None = None
    index: int | None = None

    @property
    def terminated(self) -> bool:
        return self.terminal_outcome is not None

    @property
    def points(self) -> list[SimplexPoint]:
        return [SimplexPoint(row) for row in self.xs]

    def tilde(self, s: int = -1) -> SimplexPoint:
        return star(SimplexPoint(self.xs[s]), self.p0)

    def to_dict(self) -> dict:
        return {"format": TRAJECTORY_FORMAT, "version": FORMAT_VERSION, "kind": "chain",
                "seed": self.seed, "index": self.index, "p0": self.p0.components.tolist(),
                "outcomes": list(self.outcomes), "xs": self.xs.tolist(),
                "terminal_outcome": self.terminal_outcome, "steps_taken": self.steps_taken}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "ChainRecord":
        if data.get("kind") != "chain" or data.get("version") != FORMAT_VERSION:
            raise PersistenceError(f"not a version {FORMAT_VERSION} chain record")
        try:
            return cls(outcomes=tuple(int(k) for k in data["outcomes"]),
                       xs=np.asarray(data["xs"], dtype=float),
                       terminal_outcome=data["terminal_outcome"], steps_taken=int(data["steps_taken"]),
                       p0=SimplexPoint(data["p0"]), seed=data.get("seed"), index=data.get("index"))
        except KeyError as exc:
            raise PersistenceError(f"chain record lacks field {exc}") from exc


@dataclass
class ChainBatchResult:
    """Per-chain terminal data of a batch; -1 marks an unterminated chain."""
    terminal: np.ndarray
    steps: np.ndarray
    final_tilde: np.ndarray
    checkpoint_tilde: np.ndarray
    outcomes: list[list[int]] | None = None
    paths: list[list[np.ndarray]] | None = None
    checkpoints: tuple[int, ...] = field(default_factory=tuple)


def run_chain_batch(p0: np.ndarray, step_matrix: np.ndarray, eps_stop: float, max_steps: int,
                    rngs: Sequence[np.random.Generator], checkpoints: Sequence[int] = (),
                    record: bool = False) -> ChainBatchResult:
    """Run len(rngs) chains from x = e. Chain i consumes uniforms from rngs[i] in blocks of NOISE_CHUNK."""
    m, n = len(rngs), step_matrix.shape[0]
    p0 = np.asarray(p0, dtype=float)
    with np.errstate(divide="ignore"):
        log_p0 = np.log(p0)
        log_steps = np.log(step_matrix)
    checkpoints = tuple(int(c) for c in checkpoints)

    terminal = np.full(m, -1, dtype=int)
    steps_taken = np.zeros(m, dtype=int)
    final_tilde = np.zeros((m, n))
    checkpoint_tilde = np.full((m, len(checkpoints), n), np.nan)
    outcomes = [[] for _ in range(m)] if record else None
    paths = [[] for _ in range(m)] if record else None

    active = np.arange(m)
    log_x = np.zeros((m, n))
    uniforms = np.empty((m, 0))
    step = 0
    while active.size:
        x = _softmax(log_x)
        tilde = _softmax(log_x + log_p0[None, :])
        for c_index, c in enumerate(checkpoints):
            if c == step:
                checkpoint_tilde[active, c_index] = tilde
        if record:
            for row, i in enumerate(active):
                paths[i].append(x[row].copy())

        done = tilde.max(axis=1) >= 1.0 - eps_stop
        if step >= max_steps:
            done[:] = True
        if done.any():
            finished = active[done]
            steps_taken[finished] = step
            final_tilde[finished] = tilde[done]
            collapsed = tilde[done].max(axis=1) >= 1.0 - eps_stop
            terminal[finished[collapsed]] = tilde[done][collapsed].argmax(axis=1)
            keep = ~done
            active, log_x, x, uniforms = active[keep], log_x[keep], x[keep], uniforms[keep]
            if not active.size:
                break

        offset = step % NOISE_CHUNK
        if offset == 0:
            uniforms = np.stack([rngs[i].random(NOISE_CHUNK) for i in active])
        weights = x * p0[None, :]
        k = _draw_outcomes(_conditional_rows(weights, step_matrix), uniforms[:, offset])
        if record:
            for row, i in enumerate(active):
                outcomes[i].append(int(k[row]))
        log_x = log_x + log_steps[k]
        log_x = log_x - log_x.max(axis=1, keepdims=True)
        step += 1

    # chains that stopped before a checkpoint keep their stopped value
    missing = np.isnan(checkpoint_tilde[:, :, 0])
    rows, cols = np.nonzero(missing)
    checkpoint_tilde[rows, cols] = final_tilde[rows]
    unterminated = int((terminal < 0).sum())
    if unterminated:
        logger.debug(f"{unterminated} of {m} chains reached max_steps={max_steps} without collapse")
    return ChainBatchResult(terminal=terminal, steps=steps_taken, final_tilde=final_tilde,
                            checkpoint_tilde=checkpoint_tilde, outcomes=outcomes, paths=paths,
                            checkpoints=checkpoints)


def run_chain(psi0: QuantumState, weak_set: WeakOperatorSet, eps_stop: float, rng: np.random.Generator,
              max_steps: int = DEFAULT_MAX_STEPS, seed: int | None = None, index: int | None = None) -> ChainRecord:
    """One chain from x = e until max x~ >= 1 - eps_stop or max_steps outcomes have been drawn."""
    if not 0.0 < eps_stop < 0.5:
        raise SimplexDomainError(f"eps_stop must lie in (0, 0.5), got {eps_stop}", response=eps_stop)
    _, p0 = collapse_states(psi0, weak_set.projectors)
    result = run_chain_batch(p0.components, weak_set.steps.matrix, eps_stop, max_steps, [rng], record=True)
    terminal = int(result.terminal[0])
    return ChainRecord(outcomes=tuple(result.outcomes[0]), xs=np.vstack(result.paths[0]),
                       terminal_outcome=None if terminal < 0 else terminal, steps_taken=int(result.steps[0]),
                       p0=p0, seed=seed, index=index)


def build_weak_set(projectors: KrausSet, strength: float) -> WeakOperatorSet:
    return weak_operators(build_fundamental_steps(projectors.n, strength), projectors)
