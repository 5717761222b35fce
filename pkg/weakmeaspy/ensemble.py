"""Seeded Monte Carlo ensembles over every decomposition mode, with their statistics and artefacts."""
import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from .continuous import GaussianNoise, RecordedNoise, Trajectory, integrate_batch, moment_functional, \
    replay_trajectory, run_trajectory, trajectory_from_batch
from .discrete import ChainRecord, build_weak_set, collapse_states, run_chain, run_chain_batch
from .generalized import MeasurementMap, commuting_structure, generalized_batch, run_commuting_qsd, \
    run_generalized
from .logger import Logger
from .operators import KrausSet, QuantumState, load_kraus, projective_basis, random_kraus, rotated_pair, \
    unsharp_qubit
from .simplex import SimplexPoint, build_fundamental_steps, identity
from .weakmeasclasses import FORMAT_VERSION, OUTPUT_DIR_ENV, STATS_FORMAT, ChainConfig, EnsembleConfig, \
    ExpectationSource, ExperimentConfig, Mode, OutputConfig, Scheme, SdeConfig, SystemSpec
from .weakmeaserror import ConfigError, DimensionMismatchError, InvariantViolation, NotProjectiveError, \
    PersistenceError
from .weakmeasutils import parse_amplitude, trajectory_rng, wilson_interval

logger = Logger(__name__).get_logger()

Z_LIMIT = 4.0
MAX_UNTERMINATED = 0.01

KRAUS_FAMILIES = {
    "projective": lambda dimension, **params: projective_basis(dimension),
    "unsharp_qubit": lambda dimension, theta=0.3: unsharp_qubit(theta),
    "rotated_pair": lambda dimension, a=0.8, b=0.3, angle=0.7: rotated_pair(a, b, angle),
    "random": lambda dimension, outcomes=2, seed=0: random_kraus(dimension, outcomes, np.random.default_rng(seed)),
}


""" Configuration """


def _apply_override(raw: dict, assignment: str) -> None:
    key, sep, value = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {assignment!r} is not of the form key.sub=value", field=assignment)
    node = raw
    parts = key.strip().split(".")
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot override inside scalar {part!r}", field=key.strip())
        node = child
    node[parts[-1]] = yaml.safe_load(value)


def _section(raw: Mapping, name: str) -> dict:
    section = raw.get(name) or {}
    if not isinstance(section, Mapping):
        raise ConfigError("section must be a mapping", field=name)
    return dict(section)


def _build(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown keys {unknown}", field=name)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field=name) from exc


def _system_spec(raw: Mapping, base_dir: Path) -> SystemSpec:
    system = _section(raw, "system")
    kraus = system.pop("kraus", None) or {}
    if not isinstance(kraus, Mapping):
        raise ConfigError("must be a mapping with 'family' or 'file'", field="system.kraus")
    try:
        amplitudes = tuple(parse_amplitude(a) for a in system.pop("initial_state"))
        dimension = int(system.pop("dimension", len(amplitudes)))
    except KeyError:
        raise ConfigError("missing", field="system.initial_state")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field="system.initial_state") from exc
    if system:
        raise ConfigError(f"unknown keys {sorted(system)}", field="system")
    kraus_file = kraus.get("file")
    if kraus_file is not None:
        kraus_file = Path(kraus_file)
        kraus_file = kraus_file if kraus_file.is_absolute() else base_dir / kraus_file
    return SystemSpec(dimension=dimension, initial_state=amplitudes, kraus_family=kraus.get("family"),
                      kraus_file=kraus_file, kraus_params=dict(kraus.get("params") or {}))


def config_from_mapping(raw: Mapping, base_dir: Path = Path("."), output_dir: Path | None = None) -> ExperimentConfig:
    """Validate a parsed config mapping. Errors name the dotted field at fault."""
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping at the top level")
    try:
        mode = Mode(raw.get("mode"))
    except ValueError:
        raise ConfigError(f"unknown mode {raw.get('mode')!r}; expected one of {[m.value for m in Mode]}",
                          field="mode")
    sde = _section(raw, "sde")
    if "scheme" in sde:
        try:
            sde["scheme"] = Scheme(sde["scheme"])
        except ValueError:
            raise ConfigError(f"unknown scheme {sde['scheme']!r}", field="sde.scheme")
    ensemble = _section(raw, "ensemble")
    if "checkpoints" in ensemble:
        ensemble["checkpoints"] = tuple(float(c) for c in ensemble["checkpoints"] or ())
    if "expectation_source" in ensemble:
        try:
            ensemble["expectation_source"] = ExpectationSource(ensemble["expectation_source"])
        except ValueError:
            raise ConfigError(f"unknown source {ensemble['expectation_source']!r}",
                              field="ensemble.expectation_source")
    output = _section(raw, "output")
    directory = output_dir or output.get("directory") or os.environ.get(OUTPUT_DIR_ENV) or "weakmeaspy-out"
    output["directory"] = Path(directory)
    return ExperimentConfig(mode=mode, system=_system_spec(raw, base_dir),
                            chain=_build(ChainConfig, _section(raw, "chain"), "chain"),
                            sde=_build(SdeConfig, sde, "sde"),
                            ensemble=_build(EnsembleConfig, ensemble, "ensemble"),
                            output=_build(OutputConfig, output, "output"))


def load_config(path: Path, overrides: Iterable[str] = (), output_dir: Path | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", field=str(path)) from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}", field=str(path)) from exc
    for assignment in overrides:
        _apply_override(raw, assignment)
    return config_from_mapping(raw, base_dir=path.parent, output_dir=output_dir)


def build_system(spec: SystemSpec) -> tuple[KrausSet, QuantumState]:
    if spec.kraus_file is not None:
        kraus = load_kraus(spec.kraus_file)
    else:
        try:
            family = KRAUS_FAMILIES[spec.kraus_family]
        except KeyError:
            raise ConfigError(f"unknown family {spec.kraus_family!r}; expected one of {sorted(KRAUS_FAMILIES)}",
                              field="system.kraus.family")
        try:
            kraus = family(spec.dimension, **spec.kraus_params)
        except TypeError as exc:
            raise ConfigError(str(exc), field="system.kraus.params") from exc
    if kraus.dim != spec.dimension:
        raise DimensionMismatchError(f"Kraus operators act on dimension {kraus.dim}, config says {spec.dimension}",
                                     response=(kraus.dim, spec.dimension))
    return kraus, QuantumState.pure(spec.initial_state, normalize=True)


def describe_system(cfg: ExperimentConfig) -> dict:
    """Resolved system facts, checked against the mode's requirements."""
    kraus, psi0 = build_system(cfg.system)
    _check_mode(cfg.mode, kraus)
    return {"mode": cfg.mode.value, "dimension": kraus.dim, "outcomes": kraus.n,
            "p0": kraus.born_probabilities(psi0).tolist(), "projective": kraus.is_projective,
            "positive": kraus.is_positive, "commuting": kraus.is_commuting}


def _check_mode(mode: Mode, kraus: KrausSet) -> None:
    if mode in (Mode.DISCRETE, Mode.PROJECTIVE_QSD) and not kraus.is_projective:
        raise NotProjectiveError(f"mode {mode.value} needs a projective measurement")
    if mode is Mode.COMMUTING_QSD:
        commuting_structure(kraus)


""" Statistics """


@dataclass
class MartingaleReport:
    checkpoints: list[float]
    means: list[list[float]]
    stderr: list[list[float]]
    z: list[list[float]]

    @property
    def flagged(self) -> bool:
        return any(abs(v) > Z_LIMIT for row in self.z for v in row)


def martingale_check(samples: np.ndarray, p0: Sequence[float], checkpoints: Sequence[float]) -> MartingaleReport:
    """z-scores of the ensemble mean of x~ against p0 at each checkpoint; samples has shape (m, C, n)."""
    samples = np.asarray(samples, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    if samples.ndim != 3 or samples.shape[1] != len(checkpoints) or samples.shape[2] != p0.size:
        raise DimensionMismatchError(f"samples of shape {samples.shape} do not match {len(checkpoints)} "
                                     f"checkpoints of {p0.size} components", response=samples.shape)
    if np.isnan(samples).any():
        raise InvariantViolation("missing checkpoint data")
    m = samples.shape[0]
    means = samples.mean(axis=0)
    stderr = samples.std(axis=0, ddof=1) / np.sqrt(m) if m > 1 else np.zeros_like(means)
    deviation = means - p0[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(stderr > 0, deviation / stderr,
                     np.where(np.abs(deviation) <= 1e-12, 0.0, np.sign(deviation) * np.inf))
    return MartingaleReport(checkpoints=[float(c) for c in checkpoints], means=means.tolist(),
                            stderr=stderr.tolist(), z=z.tolist())


@dataclass
class EnsembleStats:
    """Aggregated results of one ensemble. wall_clock is kept in memory only."""
    mode: str
    trajectories: int
    master_seed: int
    p0: list[float]
    terminal_counts: list[int]
    unterminated: int
    frequencies: list[float]
    intervals: list[list[float]]
    martingale: MartingaleReport
    moment_means: list[float]
    mean_steps: float
    mean_fidelity: float | None = None
    min_fidelity: float | None = None
    extras: dict = field(default_factory=dict)
    wall_clock: float = field(default=0.0, compare=False)

    @property
    def terminated(self) -> int:
        return self.trajectories - self.unterminated

    @property
    def unterminated_fraction(self) -> float:
        return self.unterminated / self.trajectories

    def to_dict(self) -> dict:
        data = asdict(self)
        data.pop("wall_clock")
        return {"format": STATS_FORMAT, "version": FORMAT_VERSION, **data}

    @classmethod
    def from_dict(cls, data: dict) -> "EnsembleStats":
        if data.get("format") != STATS_FORMAT:
            raise PersistenceError(f"not a stats file (format {data.get('format')!r})")
        if data.get("version") != FORMAT_VERSION:
            raise PersistenceError(f"unsupported stats version {data.get('version')!r}", response=data.get("version"))
        body = {k: v for k, v in data.items() if k not in ("format", "version")}
        try:
            body["martingale"] = MartingaleReport(**body["martingale"])
            return cls(**body)
        except (KeyError, TypeError) as exc:
            raise PersistenceError(f"corrupt stats file: {exc}") from exc


def save_stats(stats: EnsembleStats, path: Path) -> None:
    Path(path).write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True))


def load_stats(path: Path) -> EnsembleStats:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"cannot read stats file {path}: {exc}", response=str(path)) from exc
    return EnsembleStats.from_dict(data)


@dataclass
class AcceptanceResult:
    passed: bool
    failures: list[str]


def acceptance(stats: EnsembleStats, z_limit: float = Z_LIMIT,
               max_unterminated: float = MAX_UNTERMINATED) -> AcceptanceResult:
    """Terminal frequencies within z_limit binomial sigmas of p0 and few unterminated runs."""
    failures = []
    if stats.unterminated_fraction > max_unterminated:
        failures.append(f"unterminated fraction {stats.unterminated_fraction:.4f} exceeds {max_unterminated}")
    n = stats.terminated
    if n == 0:
        failures.append("no trajectory terminated")
        return AcceptanceResult(False, failures)
    for k, (freq, p) in enumerate(zip(stats.frequencies, stats.p0)):
        sigma = np.sqrt(p * (1.0 - p) / n)
        if abs(freq - p) > z_limit * sigma + 1e-12:
            failures.append(f"outcome {k}: frequency {freq:.4f} is outside {z_limit} sigma of p0 = {p:.4f}")
    return AcceptanceResult(not failures, failures)


""" Batch execution """


@dataclass(frozen=True)
class BatchJob:
    cfg: ExperimentConfig
    operators: np.ndarray
    psi0: np.ndarray
    start: int
    stop: int


@dataclass
class BatchOutcome:
    terminal: np.ndarray
    steps: np.ndarray
    final_time: np.ndarray
    fidelity: np.ndarray
    checkpoint_tilde: np.ndarray
    extras: dict = field(default_factory=dict)


def _checkpoint_fidelity(final_tilde: np.ndarray, terminal: np.ndarray) -> np.ndarray:
    """Fidelity of the state rebuilt from x~ with the collapse state of its outcome, which is x~^k."""
    k = np.where(terminal >= 0, terminal, final_tilde.argmax(axis=1))
    return final_tilde[np.arange(len(k)), k]


def run_batch(job: BatchJob) -> BatchOutcome:
    """Trajectories job.start..job.stop - 1, each on its own counter-seeded generator."""
    cfg = job.cfg
    kraus = KrausSet(job.operators)
    psi0 = QuantumState.pure(job.psi0)
    seed = cfg.ensemble.master_seed
    rngs = [trajectory_rng(seed, i) for i in range(job.start, job.stop)]
    checkpoints = cfg.ensemble.checkpoints
    extras = {}
    if cfg.mode is Mode.DISCRETE:
        _, p0 = collapse_states(psi0, kraus)
        steps = build_fundamental_steps(kraus.n, cfg.chain.strength)
        result = run_chain_batch(p0.components, steps.matrix, cfg.chain.eps_stop, cfg.chain.max_steps, rngs,
                                 checkpoints=[int(c) for c in checkpoints])
        return BatchOutcome(terminal=result.terminal, steps=result.steps, final_time=result.steps.astype(float),
                            fidelity=_checkpoint_fidelity(result.final_tilde, result.terminal),
                            checkpoint_tilde=result.checkpoint_tilde)

    sde = cfg.sde
    noise = GaussianNoise(rngs, kraus.n, sde.dt)
    if cfg.mode is Mode.CONTINUOUS:
        p0 = SimplexPoint.from_unnormalized(kraus.born_probabilities(psi0))
        result = integrate_batch(p0.components, sde, noise, checkpoints=checkpoints)
        fid = _checkpoint_fidelity(result.final_tilde, result.terminal)
    elif cfg.mode is Mode.PROJECTIVE_QSD:
        states, p0 = collapse_states(psi0, kraus)
        collapse = np.vstack([np.zeros(kraus.dim, dtype=complex) if s is None else s.vector for s in states])
        result = integrate_batch(p0.components, sde, noise, checkpoints=checkpoints, projectors=kraus.operators,
                                 psi0=psi0.vector, collapse=collapse)
        k = np.where(result.terminal >= 0, result.terminal, result.final_tilde.argmax(axis=1))
        fid = np.minimum(1.0, np.abs((collapse[k].conj() * result.final_states).sum(axis=1)) ** 2)
        extras = {"checkpoint_born": result.checkpoint_born, "checkpoint_coupling": result.checkpoint_coupling}
    elif cfg.mode is Mode.GENERALIZED:
        result = generalized_batch(psi0, MeasurementMap(kraus), sde, noise, checkpoints=checkpoints)
        fid = result.target_fidelity
    else:
        result = run_commuting_qsd(psi0, kraus, sde, noise, source=cfg.ensemble.expectation_source,
                                   checkpoints=checkpoints)
        fid = result.target_fidelity
        extras = {"checkpoint_coupling": result.checkpoint_coupling, "source_gap": result.source_gap}
    return BatchOutcome(terminal=result.terminal, steps=result.steps, final_time=result.steps * sde.dt,
                        fidelity=fid, checkpoint_tilde=result.checkpoint_tilde, extras=extras)


def _fold(outcomes: Sequence[BatchOutcome]) -> BatchOutcome:
    keys = outcomes[0].extras.keys()
    return BatchOutcome(terminal=np.concatenate([o.terminal for o in outcomes]),
                        steps=np.concatenate([o.steps for o in outcomes]),
                        final_time=np.concatenate([o.final_time for o in outcomes]),
                        fidelity=np.concatenate([o.fidelity for o in outcomes]),
                        checkpoint_tilde=np.concatenate([o.checkpoint_tilde for o in outcomes]),
                        extras={k: np.concatenate([o.extras[k] for o in outcomes]) for k in keys})


@dataclass
class EnsembleRunner:
    """Runs an experiment in fixed batches of ensemble.batch_size trajectories, folded in index order."""
    cfg: ExperimentConfig

    def __post_init__(self):
        self.logger = Logger(__name__).get_logger()
        self.kraus, self.psi0 = build_system(self.cfg.system)
        _check_mode(self.cfg.mode, self.kraus)
        self.p0 = SimplexPoint.from_unnormalized(self.kraus.born_probabilities(self.psi0))
        self.outcome: BatchOutcome | None = None
        self.logger.debug(f"ensemble runner: mode={self.cfg.mode.value}, d={self.kraus.dim}, "
                          f"n={self.kraus.n}, p0={self.p0.components.tolist()}")

    def jobs(self) -> list[BatchJob]:
        total, size = self.cfg.ensemble.trajectories, self.cfg.ensemble.batch_size
        return [BatchJob(cfg=self.cfg, operators=np.array(self.kraus.operators), psi0=np.array(self.psi0.vector),
                         start=start, stop=min(start + size, total)) for start in range(0, total, size)]

    def run(self) -> EnsembleStats:
        started = time.perf_counter()
        jobs = self.jobs()
        workers = min(self.cfg.ensemble.workers, len(jobs))
        self.logger.info(f"running {self.cfg.ensemble.trajectories} {self.cfg.mode.value} trajectories "
                         f"in {len(jobs)} batches on {workers} worker(s)")
        if workers > 1:
            with Pool(processes=workers) as pool:
                outcomes = pool.map(run_batch, jobs)
        else:
            outcomes = []
            for job in jobs:
                outcomes.append(run_batch(job))
                self.logger.debug(f"batch {job.start}..{job.stop - 1} done")
        self.outcome = _fold(outcomes)
        stats = self._statistics(self.outcome)
        stats.wall_clock = time.perf_counter() - started
        self.logger.info(f"finished in {stats.wall_clock:.2f}s: counts {stats.terminal_counts}, "
                         f"unterminated {stats.unterminated}")
        if stats.unterminated_fraction > MAX_UNTERMINATED:
            self.logger.warning(f"{stats.unterminated_fraction:.2%} of trajectories did not terminate")
        if stats.martingale.flagged:
            self.logger.warning("mean x~ departs from p0 by more than 4 standard errors at some checkpoint")
        return stats

    def _statistics(self, outcome: BatchOutcome) -> EnsembleStats:
        n = self.kraus.n
        m = self.cfg.ensemble.trajectories
        terminated = outcome.terminal >= 0
        counts = np.bincount(outcome.terminal[terminated], minlength=n)
        total = int(counts.sum())
        frequencies = (counts / total).tolist() if total else [0.0] * n
        checkpoints = list(self.cfg.ensemble.checkpoints)
        report = martingale_check(outcome.checkpoint_tilde, self.p0.components, checkpoints)
        moments = [float(moment_functional(outcome.checkpoint_tilde[:, c]).mean()) for c in range(len(checkpoints))]
        fid = outcome.fidelity[terminated]
        extras = {}
        if "checkpoint_born" in outcome.extras:
            extras["born_means"] = outcome.extras["checkpoint_born"].mean(axis=0).tolist()
        if "checkpoint_coupling" in outcome.extras and checkpoints:
            extras["min_coupling"] = outcome.extras["checkpoint_coupling"].min(axis=0).tolist()
        if "source_gap" in outcome.extras:
            extras["max_source_gap"] = float(outcome.extras["source_gap"].max())
        return EnsembleStats(mode=self.cfg.mode.value, trajectories=m, master_seed=self.cfg.ensemble.master_seed,
                             p0=self.p0.components.tolist(), terminal_counts=counts.tolist(),
                             unterminated=int(m - total), frequencies=frequencies,
                             intervals=[list(wilson_interval(int(c), total)) for c in counts],
                             martingale=report, moment_means=moments, mean_steps=float(outcome.steps.mean()),
                             mean_fidelity=float(fid.mean()) if fid.size else None,
                             min_fidelity=float(fid.min()) if fid.size else None, extras=extras)

    def summary_rows(self) -> list[dict]:
        if self.outcome is None:
            raise InvariantViolation("run() has not been called")
        o = self.outcome
        return [{"index": i, "steps": int(o.steps[i]), "final_time": float(o.final_time[i]),
                 "terminal_outcome": "" if o.terminal[i] < 0 else int(o.terminal[i]),
                 "fidelity": float(o.fidelity[i])} for i in range(len(o.terminal))]

    def record(self, index: int) -> Trajectory | ChainRecord:
        """Re-run trajectory `index` alone on its own generator, keeping its full path."""
        cfg, kraus, psi0 = self.cfg, self.kraus, self.psi0
        seed = cfg.ensemble.master_seed
        rng = trajectory_rng(seed, index)
        if cfg.mode is Mode.DISCRETE:
            weak_set = build_weak_set(kraus, cfg.chain.strength)
            return run_chain(psi0, weak_set, cfg.chain.eps_stop, rng, cfg.chain.max_steps, seed=seed, index=index)
        e = identity(kraus.n)
        if cfg.mode is Mode.CONTINUOUS:
            trajectory = run_trajectory(e, self.p0, cfg.sde, rng, seed=seed, index=index)
        elif cfg.mode is Mode.PROJECTIVE_QSD:
            trajectory = run_trajectory(e, self.p0, cfg.sde, rng, projectors=kraus, psi0=psi0, seed=seed,
                                        index=index)
        elif cfg.mode is Mode.GENERALIZED:
            trajectory = run_generalized(psi0, kraus, cfg.sde, rng, seed=seed, index=index).trajectory
        else:
            result = run_commuting_qsd(psi0, kraus, cfg.sde, GaussianNoise([rng], kraus.n, cfg.sde.dt),
                                       source=cfg.ensemble.expectation_source, record=True)
            trajectory = trajectory_from_batch(result, self.p0.components, e.components, cfg.sde, seed, index)
        return _tag(trajectory, cfg.mode)

    def write_outputs(self, stats: EnsembleStats) -> list[Path]:
        out = self.cfg.output
        Path(out.directory).mkdir(parents=True, exist_ok=True)
        save_stats(stats, out.stats_path)
        write_summary(self.summary_rows(), out.summary_path)
        written = [out.stats_path, out.summary_path]
        if out.record_trajectories:
            count = min(out.record_trajectories, self.cfg.ensemble.trajectories)
            with open(out.trajectories_path, "w") as handle:
                for i in range(count):
                    handle.write(self.record(i).to_json() + "\n")
            written.append(out.trajectories_path)
        for path in written:
            self.logger.info(f"wrote {path}")
        return written


def _tag(trajectory: Trajectory, mode: Mode) -> Trajectory:
    trajectory.extra["mode"] = mode.value
    return trajectory


def run_ensemble(cfg: ExperimentConfig) -> EnsembleStats:
    return EnsembleRunner(cfg).run()


""" Artefacts """

SUMMARY_COLUMNS = ["index", "steps", "final_time", "terminal_outcome", "fidelity"]


def write_summary(rows: Sequence[Mapping[str, Any]], path: Path) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def read_records(path: Path) -> list[Trajectory | ChainRecord]:
    records = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise PersistenceError(f"cannot read trajectories file {path}: {exc}", response=str(path)) from exc
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise PersistenceError(f"{path}:{number}: {exc}", response=str(path)) from exc
        records.append(ChainRecord.from_dict(data) if data.get("kind") == "chain" else Trajectory.from_dict(data))
    return records


def replay_record(record: Trajectory | ChainRecord, cfg: ExperimentConfig | None = None) -> Trajectory | ChainRecord:
    """Recompute a stored path; raises InvariantViolation if the recomputation differs."""
    if isinstance(record, ChainRecord):
        if cfg is None or record.index is None:
            raise PersistenceError("replaying a chain needs its config and index")
        if record.seed != cfg.ensemble.master_seed:
            raise PersistenceError(f"chain was drawn with seed {record.seed}, config has {cfg.ensemble.master_seed}",
                                   response=record.seed)
        runner = EnsembleRunner(cfg)
        replayed = runner.record(record.index)
        same = replayed.outcomes == record.outcomes and np.array_equal(replayed.xs, record.xs)
    elif record.extra.get("mode") == Mode.COMMUTING_QSD.value:
        if cfg is None:
            raise PersistenceError("replaying a state-diffusion trajectory needs its config")
        kraus, psi0 = build_system(cfg.system)
        sde = SdeConfig(dt=record.dt, eps_stop=record.eps_stop, max_time=max(record.final_time, record.dt),
                        conformal_factor=record.conformal_factor, record_every=record.record_every)
        result = run_commuting_qsd(psi0, kraus, sde, RecordedNoise(record.noise),
                                   source=cfg.ensemble.expectation_source, record=True)
        replayed = trajectory_from_batch(result, record.p0.components, record.x0.components, sde, record.seed,
                                         record.index)
        same = np.array_equal(replayed.xs, record.xs)
    else:
        replayed = replay_trajectory(record)
        same = np.array_equal(replayed.xs, record.xs)
    if not same:
        raise InvariantViolation(f"replay of trajectory {record.index} does not reproduce the stored path")
    return replayed


def report_tables(stats: EnsembleStats) -> tuple[list[list[float]], list[list[float]]]:
    """(t, mean moment) rows and (t, mean x~^1..x~^n) rows."""
    times = stats.martingale.checkpoints
    return ([[t, mu] for t, mu in zip(times, stats.moment_means)],
            [[t, *means] for t, means in zip(times, stats.martingale.means)])


def write_report_tables(stats: EnsembleStats, directory: Path) -> list[Path]:
    moments, tildes = report_tables(stats)
    n = len(stats.p0)
    moment_path, tilde_path = Path(directory) / "moment_trend.csv", Path(directory) / "tilde_means.csv"
    with open(moment_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t", "mean_moment"])
        writer.writerows(moments)
    with open(tilde_path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t", *[f"x{i}" for i in range(n)]])
        writer.writerows(tildes)
    return [moment_path, tilde_path]


def format_report(stats: EnsembleStats) -> str:
    lines = [f"mode {stats.mode}: {stats.trajectories} trajectories, seed {stats.master_seed}", "",
             f"{'outcome':>8} {'count':>8} {'frequency':>10} {'95% interval':>20} {'p0':>8}"]
    for k, (count, freq, (lo, hi), p) in enumerate(zip(stats.terminal_counts, stats.frequencies, stats.intervals,
                                                      stats.p0)):
        lines.append(f"{k:>8} {count:>8} {freq:>10.4f} {f'[{lo:.4f}, {hi:.4f}]':>20} {p:>8.4f}")
    if stats.unterminated:
        lines.append(f"WARNING: {stats.unterminated} unterminated trajectories "
                     f"({stats.unterminated_fraction:.2%})")
    if stats.martingale.checkpoints:
        lines += ["", f"{'t':>10} {'max |z|':>8} {'moment':>10}"]
        for t, z, mu in zip(stats.martingale.checkpoints, stats.martingale.z, stats.moment_means):
            lines.append(f"{t:>10g} {max(abs(v) for v in z):>8.2f} {mu:>10.5f}")
        if stats.martingale.flagged:
            lines.append(f"WARNING: martingale check exceeds {Z_LIMIT} standard errors")
    if stats.mean_fidelity is not None:
        lines += ["", f"fidelity mean {stats.mean_fidelity:.6f}, min {stats.min_fidelity:.6f}"]
    result = acceptance(stats)
    lines += ["", "acceptance: " + ("PASS" if result.passed else "FAIL")] + [f"  {f}" for f in result.failures]
    return "\n".join(lines)
