"""Dense complex linear algebra on the system Hilbert space.

Every matrix function here (square root, exponential, logarithm) reduces to a transform of
eigenvalues of a Hermitian or normal matrix; the polar factors come from the singular-vector
pairs of the operator.
"""
import json
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .logger import Logger
from .weakmeasclasses import BORN_FLOOR, BRANCH_CUT_FLAG, COMPLETENESS_TOL, FACTOR_TOL, FORMAT_VERSION, \
    KRAUS_FORMAT, NEGATIVE_EIGEN_TOL, STATE_TOL, StateKind
from .weakmeaserror import CompletenessError, DimensionMismatchError, OperatorDomainError, \
    OutcomeImpossibleError, PersistenceError, StateValidationError
from .weakmeasutils import decode_complex_matrix, encode_complex_matrix, frobenius, hermitian_part

logger = Logger(__name__).get_logger()


def dagger(m: np.ndarray) -> np.ndarray:
    return np.conj(np.swapaxes(m, -1, -2))


def _require_square(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=complex)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatchError(f"{name} must be square, got shape {m.shape}", response=m.shape)
    return m


def _require_hermitian(m: np.ndarray, name: str = "matrix") -> np.ndarray:
    m = _require_square(m, name)
    asymmetry = frobenius(m - m.conj().T)
    if asymmetry > STATE_TOL:
        raise OperatorDomainError(f"{name} is not Hermitian (|A - A^dag|_F = {asymmetry:.3e})", response=asymmetry)
    return hermitian_part(m)


@dataclass(frozen=True, eq=False)
class QuantumState:
    """A pure state vector or a density matrix, validated on construction."""
    kind: StateKind
    data: np.ndarray

    def __post_init__(self):
        kind = StateKind(self.kind)
        data = np.array(self.data, dtype=complex)
        if kind is StateKind.PURE:
            if data.ndim != 1 or data.size < 1:
                raise StateValidationError(f"a pure state needs a vector, got shape {data.shape}")
            norm = float(np.linalg.norm(data))
            if abs(norm - 1.0) > STATE_TOL:
                raise StateValidationError(f"pure state norm is {norm!r}, not 1", response=norm)
        else:
            if data.ndim != 2 or data.shape[0] != data.shape[1]:
                raise StateValidationError(f"a density matrix must be square, got shape {data.shape}")
            asymmetry = frobenius(data - data.conj().T)
            if asymmetry > STATE_TOL:
                raise StateValidationError(f"density matrix is not Hermitian ({asymmetry:.3e})", response=asymmetry)
            tr = float(np.trace(data).real)
            if abs(tr - 1.0) > STATE_TOL:
                raise StateValidationError(f"density matrix trace is {tr!r}, not 1", response=tr)
            lowest = float(np.linalg.eigvalsh(hermitian_part(data)).min())
            if lowest < -STATE_TOL:
                raise StateValidationError(f"density matrix has eigenvalue {lowest:.3e} < 0", response=lowest)
        data.flags.writeable = False
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "data", data)

    @classmethod
    def pure(cls, amplitudes: Sequence[complex] | np.ndarray, normalize: bool = False) -> "QuantumState":
        v = np.asarray(amplitudes, dtype=complex)
        if normalize:
            norm = np.linalg.norm(v)
            if norm == 0:
                raise StateValidationError("cannot normalize the zero vector")
            v = v / norm
        return cls(StateKind.PURE, v)

    @classmethod
    def density(cls, matrix: np.ndarray) -> "QuantumState":
        return cls(StateKind.DENSITY, matrix)

    @classmethod
    def basis(cls, d: int, k: int) -> "QuantumState":
        v = np.zeros(d, dtype=complex)
        v[k] = 1.0
        return cls.pure(v)

    @property
    def is_pure(self) -> bool:
        return self.kind is StateKind.PURE

    @property
    def dim(self) -> int:
        return int(self.data.shape[0])

    @property
    def vector(self) -> np.ndarray:
        if not self.is_pure:
            raise StateValidationError("a density-matrix state has no state vector")
        return self.data

    def density_matrix(self) -> np.ndarray:
        if self.is_pure:
            return np.outer(self.data, self.data.conj())
        return np.array(self.data)

    def expectation(self, operator: np.ndarray) -> complex:
        if self.is_pure:
            return complex(np.vdot(self.data, operator @ self.data))
        return complex(np.trace(operator @ self.data))

    def __repr__(self):
        return f"QuantumState({self.kind.value}, dim={self.dim})"


def completeness_residual(operators) -> float:
    """|sum_j M_j^dag M_j - I|_F for a KrausSet or any sequence of square matrices."""
    ops = operators.operators if isinstance(operators, KrausSet) else _stack_operators(operators)
    d = ops.shape[-1]
    return frobenius(np.einsum("jki,jkl->il", ops.conj(), ops) - np.eye(d))


def _stack_operators(operators) -> np.ndarray:
    mats = [np.asarray(m, dtype=complex) for m in operators]
    if not mats:
        raise DimensionMismatchError("a Kraus set needs at least one operator")
    shapes = {m.shape for m in mats}
    if len(shapes) != 1:
        raise DimensionMismatchError(f"operators have differing shapes {sorted(shapes)}", response=sorted(shapes))
    shape = shapes.pop()
    if len(shape) != 2 or shape[0] != shape[1]:
        raise DimensionMismatchError(f"operators must be square, got shape {shape}", response=shape)
    return np.stack(mats)


@dataclass(frozen=True, eq=False)
class KrausSet:
    """Measurement operators M_1..M_n with sum M_j^dag M_j = I."""
    operators: np.ndarray

    def __post_init__(self):
        ops = _stack_operators(self.operators)
        residual = completeness_residual(ops)
        if residual > COMPLETENESS_TOL:
            raise CompletenessError(f"Kraus operators are not complete: completeness residual {residual:.3e} "
                                    f"exceeds {COMPLETENESS_TOL:.0e}", response=residual)
        ops.flags.writeable = False
        object.__setattr__(self, "operators", ops)

    @property
    def n(self) -> int:
        return int(self.operators.shape[0])

    @property
    def dim(self) -> int:
        return int(self.operators.shape[1])

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, j: int) -> np.ndarray:
        return self.operators[j]

    @cached_property
    def adjoint_products(self) -> np.ndarray:
        """Stack of M_j^dag M_j."""
        return np.stack([hermitian_part(m.conj().T @ m) for m in self.operators])

    @cached_property
    def is_projective(self) -> bool:
        eye = np.eye(self.dim)
        for p in self.operators:
            if frobenius(p - p.conj().T) > STATE_TOL or frobenius(p @ p - p) > STATE_TOL:
                return False
        for p, q in combinations(self.operators, 2):
            if frobenius(p @ q) > STATE_TOL:
                return False
        return frobenius(self.operators.sum(axis=0) - eye) <= STATE_TOL

    @cached_property
    def is_positive(self) -> bool:
        for m in self.operators:
            if frobenius(m - m.conj().T) > STATE_TOL:
                return False
            if np.linalg.eigvalsh(hermitian_part(m)).min() < -STATE_TOL:
                return False
        return True

    @cached_property
    def is_commuting(self) -> bool:
        return all(frobenius(a @ b - b @ a) <= STATE_TOL for a, b in combinations(self.operators, 2))

    def born_probabilities(self, state: QuantumState) -> np.ndarray:
        if state.dim != self.dim:
            raise DimensionMismatchError(f"state dimension {state.dim} differs from operator dimension {self.dim}",
                                         response=(state.dim, self.dim))
        p = np.array([state.expectation(e).real for e in self.adjoint_products])
        return np.clip(p, 0.0, None)

    def to_dict(self) -> dict:
        return {"format": KRAUS_FORMAT, "version": FORMAT_VERSION, "dimension": self.dim,
                "operators": [encode_complex_matrix(m) for m in self.operators]}

    @classmethod
    def from_dict(cls, data: dict) -> "KrausSet":
        if data.get("format") != KRAUS_FORMAT:
            raise PersistenceError(f"not a Kraus file (format {data.get('format')!r})")
        if data.get("version") != FORMAT_VERSION:
            raise PersistenceError(f"unsupported Kraus file version {data.get('version')!r}",
                                   response=data.get("version"))
        try:
            dimension = int(data["dimension"])
            ops = [decode_complex_matrix(m, dimension) for m in data["operators"]]
        except KeyError as exc:
            raise PersistenceError(f"Kraus file lacks field {exc}") from exc
        return cls(np.stack(ops))


def save_kraus(kraus: KrausSet, path: Path) -> None:
    Path(path).write_text(json.dumps(kraus.to_dict(), indent=1))


def load_kraus(path: Path) -> KrausSet:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"cannot read Kraus file {path}: {exc}", response=str(path)) from exc
    return KrausSet.from_dict(data)


def projective_basis(d: int) -> KrausSet:
    """Rank-one projectors onto the computational basis."""
    return KrausSet(np.stack([np.diag(row).astype(complex) for row in np.eye(d)]))


def unsharp_qubit(theta: float) -> KrausSet:
    c, s = np.cos(theta), np.sin(theta)
    return KrausSet(np.stack([np.diag([c, s]), np.diag([s, c])]).astype(complex))


def rotated_pair(a: float = 0.8, b: float = 0.3, angle: float = 0.7) -> KrausSet:
    """M_1 = R(angle) diag(sqrt a, sqrt b), M_2 = diag(sqrt(1-a), sqrt(1-b)); non-commuting for a != b."""
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]], dtype=complex)
    m1 = rot @ np.diag([np.sqrt(a), np.sqrt(b)])
    m2 = np.diag([np.sqrt(1.0 - a), np.sqrt(1.0 - b)]).astype(complex)
    return KrausSet(np.stack([m1, m2]))


def random_kraus(d: int, n: int, rng: np.random.Generator) -> KrausSet:
    """Blocks of a random Stinespring isometry."""
    g = rng.standard_normal((n * d, d)) + 1j * rng.standard_normal((n * d, d))
    q, r = np.linalg.qr(g)
    q = q * (np.diag(r) / np.abs(np.diag(r)))[None, :]
    return KrausSet(q.reshape(n, d, d))


def random_state(d: int, rng: np.random.Generator) -> QuantumState:
    return QuantumState.pure(rng.standard_normal(d) + 1j * rng.standard_normal(d), normalize=True)


@dataclass(frozen=True, eq=False)
class PolarFactors:
    unitary: np.ndarray
    positive: np.ndarray
    hamiltonian: np.ndarray
    near_branch_cut: bool = False

    def recompose(self) -> np.ndarray:
        return self.unitary @ self.positive


def principal_log(u: np.ndarray) -> tuple[np.ndarray, bool]:
    """Hermitian H with exp(iH) = U and eigenphases in (-pi, pi]; also reports phases near -pi."""
    u = _require_square(u, "unitary")
    t, z = linalg.schur(u, output="complex")
    phases = np.angle(np.diag(t))
    phases = np.where(phases <= -np.pi, phases + 2.0 * np.pi, phases)
    near_cut = bool(np.any(phases > np.pi - BRANCH_CUT_FLAG))
    if near_cut:
        logger.warning(f"unitary has an eigenphase within {BRANCH_CUT_FLAG:.0e} of the branch cut at -pi")
    return hermitian_part((z * phases[None, :]) @ z.conj().T), near_cut


def polar_decompose(m: np.ndarray) -> PolarFactors:
    """Left polar decomposition M = U L from the singular-vector pairs of M.

    For singular M the kernel of M is sent onto the orthogonal complement of its range by the
    rotation closest to the identity, so a positive semidefinite M gets U = I.
    """
    m = _require_square(m, "operator")
    w, s, vh = linalg.svd(m)
    null = s <= FACTOR_TOL * max(float(s[0]), 1.0)
    if null.any():
        left, right = w[:, null], vh[null].conj().T
        # orthogonal Procrustes: the unitary R minimizing |left R - right|_F
        a, _, bh = linalg.svd(left.conj().T @ right)
        w = w.copy()
        w[:, null] = left @ (a @ bh)
    unitary = w @ vh
    positive = hermitian_part((vh.conj().T * s[None, :]) @ vh)
    hamiltonian, near_cut = principal_log(unitary)
    return PolarFactors(unitary=unitary, positive=positive, hamiltonian=hamiltonian, near_branch_cut=near_cut)


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    a = _require_hermitian(a)
    w, v = linalg.eigh(a)
    if w.min() < -NEGATIVE_EIGEN_TOL:
        raise OperatorDomainError(f"matrix has eigenvalue {w.min():.3e}; no positive square root", response=w.min())
    w = np.clip(w, 0.0, None)
    return hermitian_part((v * np.sqrt(w)[None, :]) @ v.conj().T)


def unitary_from_hamiltonian(h: np.ndarray, phase: float = 1.0) -> np.ndarray:
    """exp(i * phase * H)."""
    h = _require_hermitian(h, "hamiltonian")
    w, v = linalg.eigh(h)
    return (v * np.exp(1j * phase * w)[None, :]) @ v.conj().T


def apply_and_normalize(m: np.ndarray, state: QuantumState) -> tuple[QuantumState, float]:
    m = _require_square(m, "operator")
    if m.shape[0] != state.dim:
        raise DimensionMismatchError(f"operator dimension {m.shape[0]} differs from state dimension {state.dim}",
                                     response=(m.shape[0], state.dim))
    if state.is_pure:
        out = m @ state.data
        probability = float(np.vdot(out, out).real)
        if probability <= BORN_FLOOR:
            raise OutcomeImpossibleError(f"outcome probability {probability:.3e} is below {BORN_FLOOR:.0e}",
                                         response=probability)
        return QuantumState.pure(out / np.sqrt(probability)), probability
    out = m @ state.data @ m.conj().T
    probability = float(np.trace(out).real)
    if probability <= BORN_FLOOR:
        raise OutcomeImpossibleError(f"outcome probability {probability:.3e} is below {BORN_FLOOR:.0e}",
                                     response=probability)
    return QuantumState.density(hermitian_part(out / probability)), probability


def fidelity(a: QuantumState, b: QuantumState) -> float:
    """|<a|b>|^2 for two pure states, Uhlmann fidelity otherwise."""
    if a.dim != b.dim:
        raise DimensionMismatchError(f"state dimensions differ: {a.dim} and {b.dim}", response=(a.dim, b.dim))
    if a.is_pure and b.is_pure:
        return float(min(1.0, abs(np.vdot(a.data, b.data)) ** 2))
    root = psd_sqrt(a.density_matrix())
    inner = hermitian_part(root @ b.density_matrix() @ root)
    eig = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    return float(min(1.0, np.sqrt(eig).sum() ** 2))
