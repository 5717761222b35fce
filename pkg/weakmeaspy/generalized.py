"""Generalized measurements as the endpoint of a feedback-controlled diffusion.

An operator-valued map M(x) = Upsilon(x) Lambda(x) on the simplex equals the identity at e and the
Kraus operator M_k at vertex k. Driving x with the simplex diffusion and pulling the initial state
back through M(x_t) realizes the measurement. For positive commuting Kraus sets the pulled-back
state also obeys its own diffusion equation, integrated here in the joint eigenbasis.
"""
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .continuous import GaussianNoise, RecordedNoise, SdeBatchResult, Trajectory, _a_matrix, _apply_a, \
    drive_rows, _project_rows, _tilde_rows, integrate_batch, run_trajectory
from .logger import Logger
from .operators import KrausSet, PolarFactors, QuantumState, apply_and_normalize, fidelity, polar_decompose, \
    psd_sqrt, unitary_from_hamiltonian
from .simplex import SimplexPoint, identity
from .weakmeasclasses import BORN_FLOOR, FACTOR_TOL, NOISE_CHUNK, ExpectationSource, SdeConfig
from .weakmeaserror import DimensionMismatchError, OperatorDomainError, SimplexDomainError
from .weakmeasutils import frobenius, hermitian_part

logger = Logger(__name__).get_logger()


@dataclass(frozen=True, eq=False)
class MeasurementMap:
    """Polar data of a Kraus set: M_j = U_j L_j, U_j = exp(i H_j)."""
    kraus: KrausSet
    polar: tuple[PolarFactors, ...] = field(init=False)

    def __post_init__(self):
        if self.kraus.n < 2:
            raise SimplexDomainError("a measurement map needs at least two outcomes", response=self.kraus.n)
        object.__setattr__(self, "logger", Logger(__name__).get_logger())
        object.__setattr__(self, "polar", tuple(polar_decompose(m) for m in self.kraus.operators))
        worst = max(frobenius(f.recompose() - m) for f, m in zip(self.polar, self.kraus.operators))
        if worst > FACTOR_TOL:
            raise OperatorDomainError(f"polar factors do not recompose the Kraus operators ({worst:.3e})",
                                      response=worst)
        if any(f.near_branch_cut for f in self.polar):
            self.logger.warning("a Kraus operator has a unitary factor with an eigenphase near -pi")
        self.logger.debug(f"measurement map: {self.n} outcomes on dimension {self.dim}, "
                          f"positive={self.kraus.is_positive}, commuting={self.kraus.is_commuting}")

    @property
    def n(self) -> int:
        return self.kraus.n

    @property
    def dim(self) -> int:
        return self.kraus.dim

    @property
    def hamiltonians(self) -> np.ndarray:
        return np.stack([f.hamiltonian for f in self.polar])

    @property
    def squares(self) -> np.ndarray:
        """L_j^dag L_j, which equals M_j^dag M_j."""
        return self.kraus.adjoint_products


def _check_point(x: SimplexPoint, mmap: MeasurementMap) -> None:
    if x.n != mmap.n:
        raise DimensionMismatchError(f"{x.n}-point simplex for {mmap.n} Kraus operators", response=(x.n, mmap.n))


def upsilon(x: SimplexPoint, mmap: MeasurementMap) -> np.ndarray:
    """exp(i n/(n-1) sum_j x^j (x^j - 1/n) H_j)."""
    _check_point(x, mmap)
    n = mmap.n
    weights = n / (n - 1) * x.components * (x.components - 1.0 / n)
    return unitary_from_hamiltonian(np.einsum("j,jde->de", weights, mmap.hamiltonians))


def f_factor(x: SimplexPoint) -> float:
    """1 + n sum_j x^j (1 - x^j): n at the identity, 1 at every vertex."""
    return float(1.0 + x.n * (x.components * (1.0 - x.components)).sum())


def lambda_map(x: SimplexPoint, mmap: MeasurementMap) -> np.ndarray:
    _check_point(x, mmap)
    weighted = np.einsum("j,jde->de", x.components, mmap.squares)
    return np.sqrt(f_factor(x)) * psd_sqrt(hermitian_part(weighted))


def measurement_map(x: SimplexPoint, mmap: MeasurementMap) -> np.ndarray:
    return upsilon(x, mmap) @ lambda_map(x, mmap)


def pullback_state(x: SimplexPoint, rho0: QuantumState, mmap: MeasurementMap) -> QuantumState:
    """M(x) rho0 M(x)^dag / Tr(M^dag M rho0)."""
    return apply_and_normalize(measurement_map(x, mmap), rho0)[0]


def strong_targets(psi0: QuantumState, kraus: KrausSet) -> list[QuantumState | None]:
    """Post-measurement states M_k psi0 / sqrt(p_k); None where the outcome is impossible."""
    p0 = kraus.born_probabilities(psi0)
    return [apply_and_normalize(m, psi0)[0] if p > BORN_FLOOR else None for m, p in zip(kraus.operators, p0)]


@dataclass(frozen=True, eq=False)
class GeneralizedOutcome:
    """terminal_index is None for an unterminated run; its fidelity is then taken against argmax x~."""
    terminal_index: int | None
    final_state: QuantumState
    fidelity_to_target: float
    trajectory: Trajectory | None = None

    @property
    def terminated(self) -> bool:
        return self.terminal_index is not None


def _initial_p0(psi0: QuantumState, kraus: KrausSet) -> SimplexPoint:
    if psi0.dim != kraus.dim:
        raise DimensionMismatchError(f"state dimension {psi0.dim} differs from operator dimension {kraus.dim}",
                                     response=(psi0.dim, kraus.dim))
    return SimplexPoint.from_unnormalized(kraus.born_probabilities(psi0))


def _outcome_at(x: np.ndarray, tilde: np.ndarray, terminal: int, psi0: QuantumState, mmap: MeasurementMap,
                targets: Sequence[QuantumState | None]) -> tuple[QuantumState, float]:
    state = pullback_state(SimplexPoint(x), psi0, mmap)
    k = terminal if terminal >= 0 else int(tilde.argmax())
    target = targets[k]
    return state, 0.0 if target is None else fidelity(state, target)


def run_generalized(psi0: QuantumState, kraus: KrausSet, cfg: SdeConfig, rng: np.random.Generator,
                    mmap: MeasurementMap | None = None, seed: int | None = None,
                    index: int | None = None) -> GeneralizedOutcome:
    """Drive x from e with p0_j = Tr(M_j^dag M_j rho0) and pull rho0 back along the path.

    Pure initial states get their pulled-back vectors stored at every recorded step of the trajectory.
    """
    mmap = mmap or MeasurementMap(kraus)
    p0 = _initial_p0(psi0, kraus)
    trajectory = run_trajectory(identity(kraus.n), p0, cfg, rng, seed=seed, index=index)
    if psi0.is_pure:
        states = np.vstack([pullback_state(x, psi0, mmap).vector for x in trajectory.points])
        trajectory = replace(trajectory, states=states)
    final_x = trajectory.xs[-1]
    terminal = -1 if trajectory.terminal_outcome is None else trajectory.terminal_outcome
    state, fid = _outcome_at(final_x, _tilde_rows(final_x[None, :], p0.components)[0], terminal, psi0, mmap,
                             strong_targets(psi0, kraus))
    return GeneralizedOutcome(terminal_index=trajectory.terminal_outcome, final_state=state,
                              fidelity_to_target=fid, trajectory=trajectory)


@dataclass
class GeneralizedBatchResult(SdeBatchResult):
    """Adds the target fidelity of each pulled-back terminal state."""
    target_fidelity: np.ndarray | None = None


def generalized_batch(psi0: QuantumState, mmap: MeasurementMap, cfg: SdeConfig, noise: GaussianNoise | RecordedNoise,
                      checkpoints: Sequence[float] = ()) -> GeneralizedBatchResult:
    p0 = _initial_p0(psi0, mmap.kraus)
    result = integrate_batch(p0.components, cfg, noise, checkpoints=checkpoints)
    targets = strong_targets(psi0, mmap.kraus)
    fidelities = np.array([
        _outcome_at(x, tilde, int(k), psi0, mmap, targets)[1]
        for x, tilde, k in zip(result.final_x, result.final_tilde, result.terminal)])
    return GeneralizedBatchResult(**vars(result), target_fidelity=fidelities)


@dataclass(frozen=True, eq=False)
class CommutingStructure:
    """Joint eigenbasis of a positive commuting Kraus set: M_j = V diag(eigenvalues[j]) V^dag."""
    basis: np.ndarray
    eigenvalues: np.ndarray

    @property
    def squares(self) -> np.ndarray:
        return self.eigenvalues ** 2

    @property
    def n(self) -> int:
        return int(self.eigenvalues.shape[0])

    @property
    def dim(self) -> int:
        return int(self.eigenvalues.shape[1])

    def to_basis(self, vector: np.ndarray) -> np.ndarray:
        return self.basis.conj().T @ vector

    def from_basis(self, coefficients: np.ndarray) -> np.ndarray:
        return coefficients @ self.basis.T


def commuting_structure(kraus: KrausSet) -> CommutingStructure:
    """Diagonalize a fixed generic combination of the operators; every M_j is diagonal in its eigenbasis."""
    if not (kraus.is_positive and kraus.is_commuting):
        raise OperatorDomainError("the state diffusion needs positive, pairwise commuting Kraus operators")
    weights = np.sqrt(2.0) + np.arange(kraus.n) * (np.sqrt(5.0) - 1.0) / 2.0
    combination = hermitian_part(np.einsum("j,jde->de", weights, kraus.operators))
    _, basis = np.linalg.eigh(combination)
    rotated = np.einsum("da,jde,eb->jab", basis.conj(), kraus.operators, basis)
    diagonal = np.einsum("jaa->ja", rotated)
    off_diagonal = max(frobenius(r - np.diag(np.diag(r))) for r in rotated)
    if off_diagonal > FACTOR_TOL:
        raise OperatorDomainError(f"no joint eigenbasis found (off-diagonal residual {off_diagonal:.3e})",
                                  response=off_diagonal)
    return CommutingStructure(basis=basis, eigenvalues=np.clip(diagonal.real, 0.0, None))


def _structure(kraus: KrausSet | CommutingStructure) -> CommutingStructure:
    return kraus if isinstance(kraus, CommutingStructure) else commuting_structure(kraus)


def _mix(xs: np.ndarray, squares: np.ndarray) -> np.ndarray:
    """sum_m x^m M_m^2 per row, reduced in a fixed order for every batch size."""
    return (xs[:, :, None] * squares[None, :, :]).sum(axis=1)


def _a_rows(xs: np.ndarray, squares: np.ndarray) -> np.ndarray:
    """Eigenvalues of A_i = M_i^2 / sum_m x^m M_m^2, shape (rows, n, d)."""
    return squares[None, :, :] / _mix(xs, squares)[:, None, :]


def a_operators(x: SimplexPoint, kraus: KrausSet | CommutingStructure) -> np.ndarray:
    structure = _structure(kraus)
    if x.n != structure.n:
        raise DimensionMismatchError(f"{x.n}-point simplex for {structure.n} Kraus operators")
    values = _a_rows(x.components[None, :], structure.squares)[0]
    return np.einsum("da,ja,ea->jde", structure.basis, values, structure.basis.conj())


def _qsd_rows(coefficients: np.ndarray, xs: np.ndarray, structure: CommutingStructure, dt: float, dw: np.ndarray,
              conformal_factor: float, beta_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw increments (d coefficients, dx) of the coupled equations in the eigenbasis.

    d psi = -1/8 g^jk D_j D_k psi dt + 1/2 D_i psi a^i_alpha dW^alpha with D_j = A_j - <A_j>,
    dx = g beta_x dt + a dW.
    """
    a_values = _a_rows(xs, structure.squares)
    weights = np.abs(coefficients) ** 2
    expectations = (a_values * weights[:, None, :]).sum(axis=2)
    deviations = a_values - expectations[:, :, None]
    # D^T g D = c |A D|^2 with A symmetric; A acts on the outcome index of each eigen-column
    ad = xs[:, :, None] * (deviations - (xs[:, :, None] * deviations).sum(axis=1, keepdims=True))
    quadratic = conformal_factor * (ad ** 2).sum(axis=1)
    noise = np.sqrt(conformal_factor) * _apply_a(xs, dw)
    linear = (deviations * noise[:, :, None]).sum(axis=1)
    d_coefficients = (-0.125 * quadratic * dt + 0.5 * linear) * coefficients
    d_x = (conformal_factor * dt * _apply_a(xs, _apply_a(xs, beta_x)) + noise)
    return d_coefficients, d_x


def _beta_rows(coefficients: np.ndarray, xs: np.ndarray, structure: CommutingStructure, p0: np.ndarray,
               source: ExpectationSource) -> tuple[np.ndarray, np.ndarray]:
    """(beta used by dx, |<A>_psi - <M^2>_0 / <x M^2>_0| per row)."""
    state_values = (_a_rows(xs, structure.squares) * (np.abs(coefficients) ** 2)[:, None, :]).sum(axis=2)
    initial_values = p0[None, :] / (xs * p0[None, :]).sum(axis=1, keepdims=True)
    gap = np.abs(state_values - initial_values).max(axis=1)
    return (state_values if source is ExpectationSource.STATE else initial_values), gap


def qsd_increment(psi: QuantumState, x: SimplexPoint, kraus: KrausSet | CommutingStructure, dt: float,
                  dw: Sequence[float] | np.ndarray, conformal_factor: float = 1.0,
                  source: ExpectationSource = ExpectationSource.STATE,
                  p0: SimplexPoint | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized Euler-Maruyama increments (d|psi>, dx) in the original basis."""
    structure = _structure(kraus)
    if source is ExpectationSource.INITIAL and p0 is None:
        raise OperatorDomainError("the initial expectation source needs p0")
    c = structure.to_basis(psi.vector)[None, :]
    xs = x.components[None, :]
    p0_values = (p0.components if p0 is not None else np.full(x.n, 1.0 / x.n))
    beta, _ = _beta_rows(c, xs, structure, p0_values, source)
    dc, dx = _qsd_rows(c, xs, structure, dt, np.asarray(dw, dtype=float)[None, :], conformal_factor, beta)
    return structure.from_basis(dc)[0], dx[0]


def qsd_step(psi: QuantumState, x: SimplexPoint, kraus: KrausSet | CommutingStructure, dt: float,
             dw: Sequence[float] | np.ndarray, conformal_factor: float = 1.0,
             source: ExpectationSource = ExpectationSource.STATE,
             p0: SimplexPoint | None = None) -> tuple[QuantumState, SimplexPoint]:
    if not x.is_interior:
        raise SimplexDomainError(f"{x!r} is not an interior point", response=x)
    d_psi, d_x = qsd_increment(psi, x, kraus, dt, dw, conformal_factor, source, p0)
    rows, clamped = _project_rows((x.components + d_x)[None, :])
    if clamped[0]:
        logger.debug(f"near-collapse clamp at {rows[0].tolist()}")
    return QuantumState.pure(psi.vector + d_psi, normalize=True), SimplexPoint(rows[0])


def qsd_density_increment(rho: QuantumState, x: SimplexPoint, kraus: KrausSet | CommutingStructure, dt: float,
                          dw: Sequence[float] | np.ndarray, conformal_factor: float = 1.0) -> np.ndarray:
    """d rho = g^jk (Q_j rho Q_k - 1/2 {Q_k Q_j, rho}) dt + {Q_j, rho} a^j_alpha dW^alpha, Q_j = (A_j - <A_j>)/2."""
    structure = _structure(kraus)
    a = a_operators(x, structure)
    density = rho.density_matrix()
    eye = np.eye(structure.dim)
    q = np.stack([0.5 * (a_j - np.trace(a_j @ density).real * eye) for a_j in a])
    a_x = _a_matrix(x.components)
    g = conformal_factor * a_x @ a_x
    noise = np.sqrt(conformal_factor) * _apply_a(x.components[None, :], np.asarray(dw, dtype=float)[None, :])[0]
    increment = np.zeros_like(density)
    for j in range(structure.n):
        increment += noise[j] * (q[j] @ density + density @ q[j])
        for k in range(structure.n):
            qkqj = q[k] @ q[j]
            increment += g[j, k] * dt * (q[j] @ density @ q[k] - 0.5 * (qkqj @ density + density @ qkqj))
    return increment


@dataclass
class QsdBatchResult(SdeBatchResult):
    """Adds target fidelities and the largest gap between the two expectation sources seen on each path."""
    target_fidelity: np.ndarray | None = None
    source_gap: np.ndarray | None = None


def run_commuting_qsd(psi0: QuantumState, kraus: KrausSet, cfg: SdeConfig, noise: GaussianNoise | RecordedNoise,
                      source: ExpectationSource = ExpectationSource.STATE, checkpoints: Sequence[float] = (),
                      record: bool = False) -> QsdBatchResult:
    """Integrate the coupled state and simplex equations for len(noise) trajectories from (psi0, e).

    checkpoint_coupling holds the fidelity between the integrated state and the pullback of x_t.
    """
    structure = commuting_structure(kraus)
    p0 = _initial_p0(psi0, kraus).components
    m, n, d = len(noise), structure.n, structure.dim
    c0 = structure.to_basis(psi0.vector)
    targets = structure.eigenvalues * c0[None, :]
    norms = np.linalg.norm(targets, axis=1, keepdims=True)
    targets = np.divide(targets, norms, out=np.zeros_like(targets), where=norms > 0)

    def pullback_coupling(cs: np.ndarray, xs: np.ndarray) -> np.ndarray:
        pulled = np.sqrt(_mix(xs, structure.squares)) * c0[None, :]
        pulled /= np.linalg.norm(pulled, axis=1, keepdims=True)
        return np.minimum(1.0, np.abs((pulled.conj() * cs).sum(axis=1)) ** 2)

    checkpoints = tuple(float(t) for t in checkpoints)
    checkpoint_steps = [int(round(t / cfg.dt)) for t in checkpoints]
    terminal = np.full(m, -1, dtype=int)
    steps_taken = np.zeros(m, dtype=int)
    final_x, final_tilde = np.zeros((m, n)), np.zeros((m, n))
    checkpoint_tilde = np.full((m, len(checkpoints), n), np.nan)
    checkpoint_coupling = np.full((m, len(checkpoints)), np.nan)
    final_coupling, target_fidelity, source_gap = np.zeros(m), np.zeros(m), np.zeros(m)
    final_states = np.zeros((m, d), dtype=complex)
    clamps = np.zeros(m, dtype=int)
    records = [{"times": [], "xs": [], "noise": [], "states": []} for _ in range(m)] if record else None

    active = np.arange(m)
    xs = np.full((m, n), 1.0 / n)
    cs = np.repeat(c0[None, :], m, axis=0)
    block = np.empty((m, 0, n))
    step = 0
    while active.size:
        tilde = _tilde_rows(xs, p0)
        for c, s in enumerate(checkpoint_steps):
            if s == step:
                checkpoint_tilde[active, c] = tilde
                checkpoint_coupling[active, c] = pullback_coupling(cs, xs)
        collapsed = tilde.max(axis=1) >= 1.0 - cfg.eps_stop
        done = collapsed | (step >= cfg.max_steps)
        if record:
            for row, i in enumerate(active):
                if step % cfg.record_every == 0 or done[row]:
                    records[i]["times"].append(step * cfg.dt)
                    records[i]["xs"].append(xs[row].copy())
                    records[i]["states"].append(structure.from_basis(cs[row]))
        if done.any():
            finished = active[done]
            steps_taken[finished] = step
            final_x[finished], final_tilde[finished] = xs[done], tilde[done]
            outcome = tilde[done].argmax(axis=1)
            terminal[finished[collapsed[done]]] = outcome[collapsed[done]]
            final_states[finished] = structure.from_basis(cs[done])
            final_coupling[finished] = pullback_coupling(cs[done], xs[done])
            target_fidelity[finished] = np.minimum(
                1.0, np.abs((targets[outcome].conj() * cs[done]).sum(axis=1)) ** 2)
            keep = ~done
            active, xs, cs, block = active[keep], xs[keep], cs[keep], block[keep]
            if not active.size:
                break

        offset = step % NOISE_CHUNK
        if offset == 0:
            block = noise.draw(active)
        dw = block[:, offset]
        if record:
            for row, i in enumerate(active):
                records[i]["noise"].append(dw[row].copy())
        beta, gap = _beta_rows(cs, xs, structure, p0, source)
        source_gap[active] = np.maximum(source_gap[active], gap)
        dc, _ = _qsd_rows(cs, xs, structure, cfg.dt, dw, cfg.conformal_factor, beta)
        cs = cs + dc
        cs /= np.linalg.norm(cs, axis=1, keepdims=True)
        xs, clamped = drive_rows(xs, beta, cfg.dt, dw, cfg.conformal_factor)
        clamps[active[clamped]] += 1
        step += 1

    rows, cols = np.nonzero(np.isnan(checkpoint_tilde[:, :, 0]))
    checkpoint_tilde[rows, cols] = final_tilde[rows]
    checkpoint_coupling[rows, cols] = final_coupling[rows]
    return QsdBatchResult(terminal=terminal, steps=steps_taken, final_x=final_x, final_tilde=final_tilde,
                          checkpoint_tilde=checkpoint_tilde, checkpoint_times=checkpoints, clamps=clamps,
                          final_states=final_states, checkpoint_coupling=checkpoint_coupling,
                          final_coupling=final_coupling, records=records, target_fidelity=target_fidelity,
                          source_gap=source_gap)
