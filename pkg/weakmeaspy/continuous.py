"""Continuous limit of the weak-measurement chain: a diffusion on the simplex.

dx = g(x) b dt + a(x) dW with g = c A^2, a = sqrt(c) A and A_ij = x_i (delta_ij - x_j). A is symmetric
with zero row sums, so A v = x o (v - <x, v>) is evaluated elementwise on every row of a batch.
"""
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .discrete import collapse_states
from .logger import Logger
from .operators import KrausSet, QuantumState
from .simplex import SimplexPoint, inverse, star
from .weakmeasclasses import CLAMP_FLOOR, FORMAT_VERSION, NOISE_CHUNK, TRAJECTORY_FORMAT, UNDERFLOW_FLOOR, \
    SdeConfig
from .weakmeaserror import DimensionMismatchError, NotProjectiveError, PersistenceError, SimplexDomainError
from .weakmeasutils import decode_complex_vector, encode_complex_matrix

logger = Logger(__name__).get_logger()

Stepper = Callable[[np.ndarray, np.ndarray, float, np.ndarray, float], tuple[np.ndarray, np.ndarray]]


def _require_interior(x: SimplexPoint) -> None:
    if not x.is_interior:
        raise SimplexDomainError(f"{x!r} is not an interior point", response=x)


def _a_matrix(x: np.ndarray) -> np.ndarray:
    return np.diag(x) - np.outer(x, x)


def _apply_a(rows: np.ndarray, v: np.ndarray) -> np.ndarray:
    return rows * (v - (rows * v).sum(axis=1, keepdims=True))


def metric(x: SimplexPoint, conformal_factor: float = 1.0) -> np.ndarray:
    """g = c A eta A with eta = I - 1/n; A annihilates the ones vector, so this is c A^2."""
    _require_interior(x)
    a = _a_matrix(x.components)
    return conformal_factor * a @ a


def diffusion_factor(x: SimplexPoint, conformal_factor: float = 1.0) -> np.ndarray:
    _require_interior(x)
    return np.sqrt(conformal_factor) * _a_matrix(x.components)


def drift(x: SimplexPoint, p0: SimplexPoint) -> np.ndarray:
    """b_j = p0_j / Tr(x o p0). The SDE drift term is g b."""
    if x.n != p0.n:
        raise DimensionMismatchError(f"dimensions differ: x {x.n}, p0 {p0.n}", response=(x.n, p0.n))
    _require_interior(x)
    overlap = float((x.components * p0.components).sum())
    if overlap <= UNDERFLOW_FLOOR:
        raise SimplexDomainError(f"Tr(x o p0) = {overlap:.3e} vanishes", response=overlap)
    return p0.components / overlap


def em_rows(xs: np.ndarray, p0: np.ndarray, dt: float, dw: np.ndarray,
             conformal_factor: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """One Euler-Maruyama step on every row, followed by the simplex repair. Returns (rows, clamped)."""
    b = p0[None, :] / (xs * p0[None, :]).sum(axis=1, keepdims=True)
    return drive_rows(xs, b, dt, dw, conformal_factor)


def drive_rows(xs: np.ndarray, b: np.ndarray, dt: float, dw: np.ndarray,
                 conformal_factor: float) -> tuple[np.ndarray, np.ndarray]:
    """x + g b dt + a dW for an arbitrary drift covector b per row."""
    moved = (xs + conformal_factor * dt * _apply_a(xs, _apply_a(xs, b))
             + np.sqrt(conformal_factor) * _apply_a(xs, dw))
    return _project_rows(moved)


def _project_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    clamped = (rows < CLAMP_FLOOR).any(axis=1)
    rows = np.maximum(rows, CLAMP_FLOOR)
    return rows / rows.sum(axis=1, keepdims=True), clamped


def em_step(x: SimplexPoint, p0: SimplexPoint, dt: float, dw: Sequence[float] | np.ndarray,
            conformal_factor: float = 1.0) -> SimplexPoint:
    drift(x, p0)
    dw = np.asarray(dw, dtype=float)
    if dw.shape != (x.n,):
        raise DimensionMismatchError(f"dW has shape {dw.shape}, expected ({x.n},)", response=dw.shape)
    rows, clamped = em_rows(x.components[None, :], p0.components, dt, dw[None, :], conformal_factor)
    if clamped[0]:
        logger.debug(f"near-collapse clamp at {rows[0].tolist()}")
    return SimplexPoint(rows[0])


def to_tilde(x: SimplexPoint, p0: SimplexPoint) -> SimplexPoint:
    return star(x, p0)


def from_tilde(tilde: SimplexPoint, p0: SimplexPoint) -> SimplexPoint:
    return star(tilde, inverse(p0))


def _moment_rows(rows: np.ndarray) -> np.ndarray:
    m2 = (rows ** 2).sum(axis=-1)
    m3 = (rows ** 3).sum(axis=-1)
    return m2 - 2.0 * m3 + m2 ** 2


def moment_functional(x: SimplexPoint | np.ndarray) -> float | np.ndarray:
    """m2 - 2 m3 + m2^2 with m_k = sum_i (x^i)^k; zero exactly at the vertices."""
    if isinstance(x, SimplexPoint):
        return float(max(0.0, _moment_rows(x.components)))
    return np.maximum(0.0, _moment_rows(np.asarray(x, dtype=float)))


def _projective_rows(psis: np.ndarray, projectors: np.ndarray, dt: float, dw: np.ndarray) -> np.ndarray:
    """d psi = -1/8 sum_j (P_j - <P_j>)^2 psi dt + 1/2 sum_j (P_j - <P_j>) psi dW_j, renormalized."""
    projected = np.einsum("jde,me->mjd", projectors, psis)
    p = (psis.conj()[:, None, :] * projected).sum(axis=2).real
    deviation = projected - p[:, :, None] * psis[:, None, :]
    # (P - p)^2 = (1 - 2p) P + p^2 for a projector
    square = (1.0 - 2.0 * p)[:, :, None] * projected + (p ** 2)[:, :, None] * psis[:, None, :]
    moved = psis - 0.125 * dt * square.sum(axis=1) + 0.5 * (dw[:, :, None] * deviation).sum(axis=1)
    return moved / np.linalg.norm(moved, axis=1, keepdims=True)


def _projector_stack(projectors: KrausSet) -> np.ndarray:
    if not projectors.is_projective:
        raise NotProjectiveError("the state diffusion is defined for projective measurements only")
    return projectors.operators


def projective_state_step(psi: QuantumState, projectors: KrausSet, dt: float,
                          dw: Sequence[float] | np.ndarray) -> QuantumState:
    ops = _projector_stack(projectors)
    dw = np.asarray(dw, dtype=float)
    if dw.shape != (projectors.n,):
        raise DimensionMismatchError(f"dW has shape {dw.shape}, expected ({projectors.n},)", response=dw.shape)
    return QuantumState.pure(_projective_rows(psi.vector[None, :], ops, dt, dw[None, :])[0], normalize=True)


class GaussianNoise:
    """dW blocks of NOISE_CHUNK steps, drawn from the generator owned by each trajectory."""

    def __init__(self, rngs: Sequence[np.random.Generator], n: int, dt: float):
        self.rngs = list(rngs)
        self.n = n
        self.scale = np.sqrt(dt)

    def __len__(self) -> int:
        return len(self.rngs)

    def draw(self, rows: np.ndarray) -> np.ndarray:
        return np.stack([self.scale * self.rngs[i].standard_normal((NOISE_CHUNK, self.n)) for i in rows])


class RecordedNoise:
    """Replays a stored dW log for a single trajectory; steps past the log see zero noise."""

    def __init__(self, noise: np.ndarray):
        self.noise = np.asarray(noise, dtype=float)
        self.position = 0

    def __len__(self) -> int:
        return 1

    def draw(self, rows: np.ndarray) -> np.ndarray:
        block = np.zeros((NOISE_CHUNK, self.noise.shape[1]))
        chunk = self.noise[self.position:self.position + NOISE_CHUNK]
        block[:len(chunk)] = chunk
        self.position += NOISE_CHUNK
        return np.repeat(block[None], len(rows), axis=0)


@dataclass
class SdeBatchResult:
    """Terminal and checkpoint data of a batch of diffusions; terminal is -1 for unterminated rows."""
    terminal: np.ndarray
    steps: np.ndarray
    final_x: np.ndarray
    final_tilde: np.ndarray
    checkpoint_tilde: np.ndarray
    checkpoint_times: tuple[float, ...]
    clamps: np.ndarray
    final_states: np.ndarray | None = None
    checkpoint_born: np.ndarray | None = None
    checkpoint_coupling: np.ndarray | None = None
    final_coupling: np.ndarray | None = None
    records: list[dict] | None = None


def _tilde_rows(xs: np.ndarray, p0: np.ndarray) -> np.ndarray:
    weights = xs * p0[None, :]
    return weights / weights.sum(axis=1, keepdims=True)


def _born_rows(projectors: np.ndarray, psis: np.ndarray) -> np.ndarray:
    return (np.abs(np.einsum("jde,me->mjd", projectors, psis)) ** 2).sum(axis=2)


def _coupling_fidelity(tilde: np.ndarray, psis: np.ndarray, collapse: np.ndarray) -> np.ndarray:
    """|<psi(x~)|psi>|^2 where psi(x~) = sum_i sqrt(x~^i) collapse_i."""
    reconstructed = np.sqrt(tilde) @ collapse
    reconstructed /= np.linalg.norm(reconstructed, axis=1, keepdims=True)
    return np.minimum(1.0, np.abs((reconstructed.conj() * psis).sum(axis=1)) ** 2)


def integrate_batch(p0: np.ndarray, cfg: SdeConfig, noise: GaussianNoise | RecordedNoise,
                    x0: np.ndarray | None = None, checkpoints: Sequence[float] = (), record: bool = False,
                    stepper: Stepper | None = None, projectors: np.ndarray | None = None,
                    psi0: np.ndarray | None = None, collapse: np.ndarray | None = None,
                    max_steps: int | None = None) -> SdeBatchResult:
    """Integrate len(noise) diffusions until max x~ >= 1 - eps_stop or cfg.max_steps steps.

    With projectors and psi0 the projective state diffusion runs on the same dW rows; collapse holds
    the post-measurement vectors (rows, zero for impossible outcomes) used for coupling fidelities.
    """
    stepper = stepper or em_rows
    p0 = np.asarray(p0, dtype=float)
    m, n = len(noise), p0.size
    coupled = projectors is not None
    checkpoints = tuple(float(t) for t in checkpoints)
    checkpoint_steps = [int(round(t / cfg.dt)) for t in checkpoints]
    max_steps = cfg.max_steps if max_steps is None else max_steps

    terminal = np.full(m, -1, dtype=int)
    steps_taken = np.zeros(m, dtype=int)
    final_x = np.zeros((m, n))
    final_tilde = np.zeros((m, n))
    checkpoint_tilde = np.full((m, len(checkpoints), n), np.nan)
    clamps = np.zeros(m, dtype=int)
    final_states = checkpoint_born = checkpoint_coupling = final_coupling = None
    if coupled:
        d = projectors.shape[-1]
        final_states = np.zeros((m, d), dtype=complex)
        checkpoint_born = np.full((m, len(checkpoints), n), np.nan)
        checkpoint_coupling = np.full((m, len(checkpoints)), np.nan)
        final_coupling = np.zeros(m)
        final_born = np.zeros((m, n))
        psis = np.repeat(np.asarray(psi0, dtype=complex)[None, :], m, axis=0)
    records = [{"times": [], "xs": [], "noise": [], "states": []} for _ in range(m)] if record else None

    active = np.arange(m)
    xs = np.repeat((np.full(n, 1.0 / n) if x0 is None else np.asarray(x0, dtype=float))[None, :], m, axis=0)
    block = np.empty((m, 0, n))
    step = 0
    while active.size:
        tilde = _tilde_rows(xs, p0)
        at_checkpoint = [c for c, s in enumerate(checkpoint_steps) if s == step]
        born = None
        if coupled and at_checkpoint:
            born = _born_rows(projectors, psis)
        for c in at_checkpoint:
            checkpoint_tilde[active, c] = tilde
            if coupled:
                checkpoint_born[active, c] = born
                checkpoint_coupling[active, c] = _coupling_fidelity(tilde, psis, collapse)

        collapsed = tilde.max(axis=1) >= 1.0 - cfg.eps_stop
        done = collapsed | (step >= max_steps)
        if record:
            for row, i in enumerate(active):
                if step % cfg.record_every == 0 or done[row]:
                    records[i]["times"].append(step * cfg.dt)
                    records[i]["xs"].append(xs[row].copy())
                    if coupled:
                        records[i]["states"].append(psis[row].copy())
        if done.any():
            finished = active[done]
            steps_taken[finished] = step
            final_x[finished] = xs[done]
            final_tilde[finished] = tilde[done]
            terminal[active[collapsed]] = tilde[collapsed].argmax(axis=1)
            if coupled:
                final_states[finished] = psis[done]
                final_coupling[finished] = _coupling_fidelity(tilde[done], psis[done], collapse)
                final_born[finished] = _born_rows(projectors, psis[done])
                psis = psis[~done]
            keep = ~done
            active, xs, block = active[keep], xs[keep], block[keep]
            if not active.size:
                break

        offset = step % NOISE_CHUNK
        if offset == 0:
            block = noise.draw(active)
        dw = block[:, offset]
        if record:
            for row, i in enumerate(active):
                records[i]["noise"].append(dw[row].copy())
        if coupled:
            psis = _projective_rows(psis, projectors, cfg.dt, dw)
        xs, clamped = stepper(xs, p0, cfg.dt, dw, cfg.conformal_factor)
        clamps[active[clamped]] += 1
        step += 1

    # stopped rows keep their terminal value at later checkpoints
    rows, cols = np.nonzero(np.isnan(checkpoint_tilde[:, :, 0]))
    checkpoint_tilde[rows, cols] = final_tilde[rows]
    if coupled:
        checkpoint_born[rows, cols] = final_born[rows]
        checkpoint_coupling[rows, cols] = final_coupling[rows]
    if clamps.any():
        logger.debug(f"near-collapse clamps in {int((clamps > 0).sum())} of {m} trajectories")
    return SdeBatchResult(terminal=terminal, steps=steps_taken, final_x=final_x, final_tilde=final_tilde,
                          checkpoint_tilde=checkpoint_tilde, checkpoint_times=checkpoints, clamps=clamps,
                          final_states=final_states, checkpoint_born=checkpoint_born,
                          checkpoint_coupling=checkpoint_coupling, final_coupling=final_coupling, records=records)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One recorded diffusion. xs holds every record_every-th step plus the terminal step; noise holds every dW."""
    times: np.ndarray
    xs: np.ndarray
    noise: np.ndarray
    p0: SimplexPoint
    dt: float
    steps_taken: int
    terminal_outcome: int | None
    x0: SimplexPoint
    eps_stop: float
    conformal_factor: float = 1.0
    record_every: int = 1
    states: np.ndarray | None = None
    seed: int | None = None
    index: int | None = None
    clamps: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def final_time(self) -> float:
        return self.steps_taken * self.dt

    @property
    def terminated(self) -> bool:
        return self.terminal_outcome is not None

    @property
    def points(self) -> list[SimplexPoint]:
        return [SimplexPoint(row) for row in self.xs]

    def state_at(self, i: int) -> QuantumState:
        if self.states is None:
            raise PersistenceError("this trajectory was recorded without quantum states")
        return QuantumState.pure(self.states[i], normalize=True)

    def to_dict(self) -> dict:
        data = {"format": TRAJECTORY_FORMAT, "version": FORMAT_VERSION, "kind": "sde",
                "seed": self.seed, "index": self.index, "p0": self.p0.components.tolist(),
                "x0": self.x0.components.tolist(), "dt": self.dt, "eps_stop": self.eps_stop,
                "conformal_factor": self.conformal_factor,
                "record_every": self.record_every, "steps_taken": self.steps_taken,
                "terminal_outcome": self.terminal_outcome, "clamps": self.clamps,
                "times": self.times.tolist(), "xs": self.xs.tolist(), "noise": self.noise.tolist()}
        if self.states is not None:
            data["states"] = encode_complex_matrix(self.states)
        if self.extra:
            data["extra"] = self.extra
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        if data.get("format") != TRAJECTORY_FORMAT or data.get("kind") != "sde":
            raise PersistenceError("not a diffusion trajectory record")
        if data.get("version") != FORMAT_VERSION:
            raise PersistenceError(f"trajectory version {data.get('version')} is not {FORMAT_VERSION}",
                                   response=data.get("version"))
        try:
            n = len(data["p0"])
            states = data.get("states")
            return cls(times=np.asarray(data["times"], dtype=float), xs=np.asarray(data["xs"], dtype=float),
                       noise=np.asarray(data["noise"], dtype=float).reshape(-1, n), p0=SimplexPoint(data["p0"]),
                       dt=float(data["dt"]), steps_taken=int(data["steps_taken"]),
                       terminal_outcome=data["terminal_outcome"], x0=SimplexPoint(data["x0"]),
                       conformal_factor=float(data["conformal_factor"]), record_every=int(data["record_every"]),
                       eps_stop=float(data["eps_stop"]),
                       states=None if states is None else decode_states(states),
                       seed=data.get("seed"), index=data.get("index"), clamps=int(data.get("clamps", 0)),
                       extra=data.get("extra", {}))
        except KeyError as exc:
            raise PersistenceError(f"trajectory record lacks field {exc}") from exc

    def rows(self, every: int = 1) -> list[list[float]]:
        """(t, x^1..x^n, moment) for every `every`-th stored point, always ending with the terminal point."""
        picked = list(range(0, len(self.xs), every))
        if picked[-1] != len(self.xs) - 1:
            picked.append(len(self.xs) - 1)
        moments = moment_functional(self.xs[picked])
        return [[float(self.times[i]), *self.xs[i].tolist(), float(mu)] for i, mu in zip(picked, moments)]

    def to_csv(self, path: Path, every: int = 1) -> None:
        n = self.p0.n
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["t", *[f"x{i}" for i in range(n)], "moment"])
            writer.writerows(self.rows(every))


def decode_states(rows) -> np.ndarray:
    return np.vstack([decode_complex_vector(row) for row in rows])


def trajectory_from_batch(result: SdeBatchResult, p0: np.ndarray, x0: np.ndarray, cfg: SdeConfig,
                           seed: int | None, index: int | None) -> Trajectory:
    record = result.records[0]
    n = p0.size
    terminal = int(result.terminal[0])
    return Trajectory(times=np.asarray(record["times"]), xs=np.vstack(record["xs"]),
                      noise=np.asarray(record["noise"], dtype=float).reshape(-1, n), p0=SimplexPoint(p0),
                      dt=cfg.dt, steps_taken=int(result.steps[0]),
                      terminal_outcome=None if terminal < 0 else terminal, x0=SimplexPoint(x0), eps_stop=cfg.eps_stop,
                      conformal_factor=cfg.conformal_factor, record_every=cfg.record_every,
                      states=np.vstack(record["states"]) if record["states"] else None,
                      seed=seed, index=index, clamps=int(result.clamps[0]))


def run_trajectory(x0: SimplexPoint, p0: SimplexPoint, cfg: SdeConfig, rng: np.random.Generator,
                   projectors: KrausSet | None = None, psi0: QuantumState | None = None,
                   seed: int | None = None, index: int | None = None) -> Trajectory:
    """Integrate one diffusion from x0. Given projectors and psi0, the state diffusion shares its dW."""
    if x0.n != p0.n:
        raise DimensionMismatchError(f"dimensions differ: x0 {x0.n}, p0 {p0.n}", response=(x0.n, p0.n))
    _require_interior(x0)
    ops = collapse = psi = None
    if projectors is not None:
        if psi0 is None:
            raise NotProjectiveError("a coupled run needs the initial state as well as the projectors")
        ops = _projector_stack(projectors)
        states, _ = collapse_states(psi0, projectors)
        collapse = np.vstack([np.zeros(psi0.dim, dtype=complex) if s is None else s.vector for s in states])
        psi = psi0.vector
    result = integrate_batch(p0.components, cfg, GaussianNoise([rng], p0.n, cfg.dt), x0=x0.components,
                             record=True, projectors=ops, psi0=psi, collapse=collapse)
    trajectory = trajectory_from_batch(result, p0.components, x0.components, cfg, seed, index)
    if trajectory.terminal_outcome is None:
        logger.warning(f"trajectory unterminated at t={trajectory.final_time} (index {index})")
    return trajectory


def replay_trajectory(trajectory: Trajectory) -> Trajectory:
    """Re-integrate the classical path from the stored noise log; the replay stops where the original did."""
    cfg = SdeConfig(dt=trajectory.dt, eps_stop=trajectory.eps_stop,
                    max_time=max(trajectory.final_time, trajectory.dt),
                    conformal_factor=trajectory.conformal_factor, record_every=trajectory.record_every)
    result = integrate_batch(trajectory.p0.components, cfg, RecordedNoise(trajectory.noise),
                             x0=trajectory.x0.components, record=True, max_steps=trajectory.steps_taken)
    return trajectory_from_batch(result, trajectory.p0.components, trajectory.x0.components, cfg,
                                  trajectory.seed, trajectory.index)
