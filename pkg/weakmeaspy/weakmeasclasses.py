from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from .weakmeaserror import ConfigError


"""Tolerances"""
SIMPLEX_TOL = 1e-12
UNDERFLOW_FLOOR = 1e-300
STATE_TOL = 1e-10
COMPLETENESS_TOL = 1e-10
FACTOR_TOL = 1e-9
NEGATIVE_EIGEN_TOL = 1e-8
BORN_FLOOR = 1e-14
BRANCH_CUT_FLAG = 1e-6
CLAMP_FLOOR = 1e-15

"""Defaults"""
DEFAULT_STRENGTH = 0.2
DEFAULT_EPS_STOP = 1e-3
DEFAULT_DT = 1e-3
DEFAULT_MAX_TIME = 50.0
DEFAULT_MAX_STEPS = 10**6
DEFAULT_BATCH_SIZE = 500

""" Random draws are taken from each trajectory stream in blocks of this many steps """
NOISE_CHUNK = 256

""" File formats """
KRAUS_FORMAT = "weakmeaspy.kraus"
STATS_FORMAT = "weakmeaspy.stats"
TRAJECTORY_FORMAT = "weakmeaspy.trajectory"
FORMAT_VERSION = 1

OUTPUT_DIR_ENV = "WEAKMEASPY_OUTPUT_DIR"


class StateKind(str, Enum):
    PURE = "pure"
    DENSITY = "density"


class Mode(str, Enum):
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"
    PROJECTIVE_QSD = "projective_qsd"
    GENERALIZED = "generalized"
    COMMUTING_QSD = "commuting_qsd"


class Scheme(str, Enum):
    EULER_MARUYAMA = "euler_maruyama"


class ExpectationSource(str, Enum):
    STATE = "state"
    INITIAL = "initial"


def _require(condition: bool, reason: str, name: str) -> None:
    if not condition:
        raise ConfigError(reason, field=name)


@dataclass(frozen=True)
class ChainConfig:
    strength: float = DEFAULT_STRENGTH
    eps_stop: float = DEFAULT_EPS_STOP
    max_steps: int = DEFAULT_MAX_STEPS

    def __post_init__(self):
        _require(0.0 < self.strength < 1.0, f"strength must lie in (0, 1), got {self.strength}", "chain.strength")
        _require(0.0 < self.eps_stop < 0.5, f"eps_stop must lie in (0, 0.5), got {self.eps_stop}", "chain.eps_stop")
        _require(self.max_steps >= 1, f"max_steps must be positive, got {self.max_steps}", "chain.max_steps")


@dataclass(frozen=True)
class SdeConfig:
    dt: float = DEFAULT_DT
    eps_stop: float = DEFAULT_EPS_STOP
    max_time: float = DEFAULT_MAX_TIME
    conformal_factor: float = 1.0
    scheme: Scheme = Scheme.EULER_MARUYAMA
    record_every: int = 1

    def __post_init__(self):
        _require(self.dt > 0.0, f"dt must be positive, got {self.dt}", "sde.dt")
        _require(0.0 < self.eps_stop < 0.5, f"eps_stop must lie in (0, 0.5), got {self.eps_stop}", "sde.eps_stop")
        _require(self.max_time > 0.0, f"max_time must be positive, got {self.max_time}", "sde.max_time")
        _require(self.conformal_factor > 0.0,
                 f"conformal_factor must be positive, got {self.conformal_factor}", "sde.conformal_factor")
        _require(self.record_every >= 1, f"record_every must be >= 1, got {self.record_every}", "sde.record_every")

    @property
    def max_steps(self) -> int:
        return int(round(self.max_time / self.dt))


@dataclass(frozen=True)
class SystemSpec:
    """Hilbert dimension, measurement source and initial state of an experiment.

    The measurement comes either from a named family (kraus_family plus kraus_params)
    or from a Kraus JSON file. initial_state holds complex amplitudes.
    """
    dimension: int
    initial_state: tuple[complex, ...]
    kraus_family: str | None = None
    kraus_file: Path | None = None
    kraus_params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        _require(self.dimension >= 1, f"dimension must be positive, got {self.dimension}", "system.dimension")
        _require((self.kraus_family is None) != (self.kraus_file is None),
                 "exactly one of kraus.family and kraus.file must be given", "system.kraus")
        _require(len(self.initial_state) == self.dimension,
                 f"initial_state has {len(self.initial_state)} amplitudes, dimension is {self.dimension}",
                 "system.initial_state")


@dataclass(frozen=True)
class EnsembleConfig:
    trajectories: int = 1000
    master_seed: int = 0
    batch_size: int = DEFAULT_BATCH_SIZE
    workers: int = 1
    checkpoints: tuple[float, ...] = ()
    expectation_source: ExpectationSource = ExpectationSource.INITIAL

    def __post_init__(self):
        _require(self.trajectories >= 1, f"trajectories must be >= 1, got {self.trajectories}",
                 "ensemble.trajectories")
        _require(self.master_seed >= 0, f"master_seed must be non-negative, got {self.master_seed}",
                 "ensemble.master_seed")
        _require(self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}", "ensemble.batch_size")
        _require(self.workers >= 1, f"workers must be >= 1, got {self.workers}", "ensemble.workers")
        _require(all(c >= 0 for c in self.checkpoints), "checkpoints must be non-negative",
                 "ensemble.checkpoints")
        _require(list(self.checkpoints) == sorted(self.checkpoints), "checkpoints must be sorted",
                 "ensemble.checkpoints")


@dataclass(frozen=True)
class OutputConfig:
    directory: Path = Path("weakmeaspy-out")
    stats: str = "stats.json"
    summary: str = "summary.csv"
    trajectories: str = "trajectories.jsonl"
    record_trajectories: int = 0

    def __post_init__(self):
        _require(self.record_trajectories >= 0, "record_trajectories must be non-negative",
                 "output.record_trajectories")

    @property
    def stats_path(self) -> Path:
        return Path(self.directory) / self.stats

    @property
    def summary_path(self) -> Path:
        return Path(self.directory) / self.summary

    @property
    def trajectories_path(self) -> Path:
        return Path(self.directory) / self.trajectories


@dataclass(frozen=True)
class ExperimentConfig:
    mode: Mode
    system: SystemSpec
    chain: ChainConfig = field(default_factory=ChainConfig)
    sde: SdeConfig = field(default_factory=SdeConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.mode is Mode.DISCRETE:
            _require(all(float(c).is_integer() for c in self.ensemble.checkpoints),
                     "discrete checkpoints are step counts and must be integers", "ensemble.checkpoints")

    @property
    def eps_stop(self) -> float:
        return self.chain.eps_stop if self.mode is Mode.DISCRETE else self.sde.eps_stop
