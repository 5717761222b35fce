import numbers
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .weakmeaserror import DimensionMismatchError, PersistenceError


WILSON_Z = float(stats.norm.ppf(0.975))


def trajectory_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Counter-based split: trajectory `index` owns SeedSequence(master_seed, spawn_key=(index,))."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(trajectory_seed(master_seed, index)))


def parse_amplitude(value: Any) -> complex:
    """A number, a [re, im] pair, or a string complex literal such as '0.5+0.5j'."""
    if isinstance(value, numbers.Number):
        return complex(value)
    if isinstance(value, str):
        return complex(value.replace(" ", ""))
    if isinstance(value, Sequence) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    raise ValueError(f"cannot read {value!r} as a complex amplitude")


def encode_complex_vector(v: np.ndarray) -> list[list[float]]:
    return [[float(z.real), float(z.imag)] for z in np.asarray(v, dtype=complex).ravel()]


def decode_complex_vector(data: Sequence) -> np.ndarray:
    try:
        return np.array([complex(float(re), float(im)) for re, im in data], dtype=complex)
    except (TypeError, ValueError) as exc:
        raise PersistenceError(f"malformed complex vector: {exc}") from exc


def encode_complex_matrix(m: np.ndarray) -> list[list[list[float]]]:
    m = np.asarray(m, dtype=complex)
    return [encode_complex_vector(row) for row in m]


def decode_complex_matrix(data: Sequence, dimension: int | None = None) -> np.ndarray:
    rows = [decode_complex_vector(row) for row in data]
    if not rows or any(len(row) != len(rows) for row in rows):
        raise PersistenceError("operator entries must form a square row-major matrix")
    m = np.vstack(rows)
    if dimension is not None and m.shape != (dimension, dimension):
        raise DimensionMismatchError(f"operator shape {m.shape} does not match dimension header {dimension}",
                                     response=m.shape)
    return m


def wilson_interval(successes: int, trials: int, z: float = WILSON_Z) -> tuple[float, float]:
    if trials == 0:
        return 0.0, 1.0
    p = successes / trials
    denom = 1.0 + z * z / trials
    centre = (p + z * z / (2 * trials)) / denom
    half = z * np.sqrt(p * (1.0 - p) / trials + z * z / (4 * trials * trials)) / denom
    return max(0.0, float(centre - half)), min(1.0, float(centre + half))


def frobenius(m: np.ndarray) -> float:
    return float(np.linalg.norm(m, ord="fro"))


def hermitian_part(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.conj().T)
