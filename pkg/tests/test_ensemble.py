import copy
import json
from dataclasses import replace

import numpy as np
import pytest

from weakmeaspy import OUTPUT_DIR_ENV, ChainRecord, ConfigError, DimensionMismatchError, EnsembleRunner, \
    ExpectationSource, GaussianNoise, InvariantViolation, Mode, NotProjectiveError, OperatorDomainError, \
    PersistenceError, SdeConfig, Trajectory, acceptance, build_system, config_from_mapping, describe_system, \
    drive_rows, format_report, integrate_batch, load_config, load_stats, martingale_check, read_records, \
    replay_record, report_tables, rotated_pair, save_kraus, save_stats, trajectory_rng, write_report_tables


def with_changes(mapping, **sections):
    changed = copy.deepcopy(mapping)
    for name, values in sections.items():
        if isinstance(values, dict):
            changed.setdefault(name, {}).update(values)
        else:
            changed[name] = values
    return changed


UNSHARP = {"initial_state": [1.0, 1.0], "kraus": {"family": "unsharp_qubit", "params": {"theta": 0.3}}}


class TestConfig:
    def test_valid(self, projective_config):
        cfg = config_from_mapping(projective_config)
        assert cfg.mode is Mode.CONTINUOUS
        assert cfg.sde.dt == 0.01
        assert cfg.ensemble.checkpoints == (0.5, 1.0, 2.0)
        assert cfg.system.dimension == 2
        assert cfg.eps_stop == 0.001

    @pytest.mark.parametrize("changes, field", [
        ({"mode": "sideways"}, "mode"),
        ({"sde": {"dt": -0.1}}, "sde.dt"),
        ({"sde": {"eps_stop": 0.7}}, "sde.eps_stop"),
        ({"sde": {"stepsize": 0.1}}, "sde"),
        ({"sde": {"scheme": "milstein"}}, "sde.scheme"),
        ({"chain": {"strength": 1.5}}, "chain.strength"),
        ({"ensemble": {"trajectories": 0}}, "ensemble.trajectories"),
        ({"ensemble": {"checkpoints": [2.0, 1.0]}}, "ensemble.checkpoints"),
        ({"ensemble": {"expectation_source": "future"}}, "ensemble.expectation_source"),
        ({"system": {"initial_state": [1, 0], "kraus": {}}}, "system.kraus"),
        ({"output": {"record_trajectories": -1}}, "output.record_trajectories"),
    ])
    def test_errors_name_the_field(self, projective_config, changes, field):
        raw = with_changes(projective_config, **changes)
        with pytest.raises(ConfigError) as info:
            config_from_mapping(raw)
        assert info.value.field == field
        assert str(info.value).startswith(field)

    def test_missing_initial_state(self, projective_config):
        raw = copy.deepcopy(projective_config)
        del raw["system"]["initial_state"]
        with pytest.raises(ConfigError) as info:
            config_from_mapping(raw)
        assert info.value.field == "system.initial_state"

    def test_discrete_checkpoints_are_step_counts(self, projective_config):
        raw = with_changes(projective_config, mode="discrete")
        with pytest.raises(ConfigError, match="ensemble.checkpoints"):
            config_from_mapping(raw)
        raw["ensemble"]["checkpoints"] = [10, 50]
        assert config_from_mapping(raw).eps_stop == 0.001

    def test_overrides(self, write_config, projective_config):
        path = write_config(projective_config)
        cfg = load_config(path, ["ensemble.master_seed=7", "sde.dt=0.005", "ensemble.expectation_source=state"])
        assert cfg.ensemble.master_seed == 7
        assert cfg.sde.dt == 0.005
        assert cfg.ensemble.expectation_source is ExpectationSource.STATE
        with pytest.raises(ConfigError):
            load_config(path, ["no_equals_sign"])
        with pytest.raises(ConfigError):
            load_config(path, ["mode.inner=1"])

    def test_unreadable_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.yaml")
        bad = tmp_path / "bad.yaml"
        bad.write_text("mode: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_output_directory_precedence(self, monkeypatch, tmp_path, write_config, projective_config):
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "from_env"))
        path = write_config(projective_config)
        assert load_config(path).output.directory == tmp_path / "from_env"
        raw = with_changes(projective_config, output={"directory": str(tmp_path / "from_file")})
        assert load_config(write_config(raw)).output.directory == tmp_path / "from_file"
        assert load_config(path, output_dir=tmp_path / "explicit").output.directory == tmp_path / "explicit"

    def test_kraus_file_relative_to_config(self, tmp_path, write_config, projective_config):
        save_kraus(rotated_pair(), tmp_path / "pair.json")
        raw = with_changes(projective_config, mode="generalized",
                           system={"initial_state": ["0.6", "0.8j"], "kraus": {"file": "pair.json"}})
        cfg = load_config(write_config(raw))
        kraus, psi0 = build_system(cfg.system)
        np.testing.assert_allclose(kraus.operators, rotated_pair().operators)
        np.testing.assert_allclose(psi0.vector, [0.6, 0.8j])

    def test_system_checks(self, projective_config):
        raw = with_changes(projective_config, system={"initial_state": [1, 0, 0], "dimension": 3,
                                                      "kraus": {"family": "unsharp_qubit"}})
        with pytest.raises(DimensionMismatchError):
            build_system(config_from_mapping(raw).system)
        raw = with_changes(projective_config, system={"kraus": {"family": "unknown"}})
        with pytest.raises(ConfigError, match="system.kraus.family"):
            build_system(config_from_mapping(raw).system)

    def test_mode_requirements(self, projective_config):
        discrete = with_changes(projective_config, mode="discrete", system=UNSHARP, ensemble={"checkpoints": []})
        with pytest.raises(NotProjectiveError):
            describe_system(config_from_mapping(discrete))
        qsd = with_changes(projective_config, mode="commuting_qsd",
                           system={"initial_state": [0.6, 0.8], "kraus": {"family": "rotated_pair"}})
        with pytest.raises(OperatorDomainError):
            describe_system(config_from_mapping(qsd))

    def test_describe(self, projective_config):
        facts = describe_system(config_from_mapping(projective_config))
        assert facts["projective"] and facts["commuting"]
        np.testing.assert_allclose(facts["p0"], [0.3, 0.7])


class TestMartingaleCheck:
    def test_shape_and_missing_data(self):
        with pytest.raises(DimensionMismatchError):
            martingale_check(np.zeros((4, 2, 2)), [0.5, 0.5], [1.0])
        samples = np.full((4, 1, 2), 0.5)
        samples[0, 0, 0] = np.nan
        with pytest.raises(InvariantViolation):
            martingale_check(samples, [0.5, 0.5], [1.0])

    def test_degenerate_samples(self):
        report = martingale_check(np.tile([1.0, 0.0], (5, 2, 1)), [1.0, 0.0], [0.5, 1.0])
        assert report.z == [[0.0, 0.0], [0.0, 0.0]]
        assert not report.flagged

    def test_detects_a_wrong_drift(self):
        cfg = SdeConfig(dt=0.01, max_time=20.0)
        p0 = np.array([0.3, 0.7])
        checkpoints = [0.5, 1.0]

        def reversed_drift(xs, p0, dt, dw, c):
            return drive_rows(xs, -p0[None, :] / (xs * p0[None, :]).sum(axis=1, keepdims=True), dt, dw, c)

        def run(stepper):
            noise = GaussianNoise([trajectory_rng(41, i) for i in range(1000)], 2, cfg.dt)
            result = integrate_batch(p0, cfg, noise, checkpoints=checkpoints, stepper=stepper)
            return martingale_check(result.checkpoint_tilde, p0, checkpoints)

        assert not run(None).flagged
        assert run(reversed_drift).flagged


class TestEnsembleRunner:
    def test_projective_run(self, projective_config):
        stats = EnsembleRunner(config_from_mapping(projective_config)).run()
        assert sum(stats.terminal_counts) + stats.unterminated == 200
        assert stats.unterminated == 0
        assert acceptance(stats).passed
        assert not stats.martingale.flagged
        assert len(stats.moment_means) == 3
        assert stats.moment_means[0] > stats.moment_means[-1]
        assert stats.min_fidelity >= 1 - 1e-3 - 1e-12

    def test_moment_functional_decreases_to_zero(self, projective_config):
        raw = with_changes(projective_config, ensemble={"checkpoints": [0.25, 0.5, 1.0, 2.0, 4.0, 100.0]})
        stats = EnsembleRunner(config_from_mapping(raw)).run()
        assert stats.unterminated == 0
        assert stats.moment_means[0] <= 0.25
        assert (np.diff(stats.moment_means) <= 2e-3).all()
        assert stats.moment_means[-1] <= 0.01

    def test_results_do_not_depend_on_workers_or_batches(self, projective_config):
        serial = EnsembleRunner(config_from_mapping(projective_config)).run()
        parallel = with_changes(projective_config, ensemble={"workers": 2})
        rebatched = with_changes(projective_config, ensemble={"batch_size": 200})
        for raw in (parallel, rebatched):
            assert EnsembleRunner(config_from_mapping(raw)).run().to_dict() == serial.to_dict()

    def test_seed_changes_results(self, projective_config):
        first = EnsembleRunner(config_from_mapping(projective_config)).run()
        other = with_changes(projective_config, ensemble={"master_seed": 4})
        second = EnsembleRunner(config_from_mapping(other)).run()
        assert first.to_dict().keys() == second.to_dict().keys()
        assert first.martingale.means != second.martingale.means

    @pytest.mark.parametrize("mode", ["discrete", "continuous", "projective_qsd"])
    def test_vertex_p0(self, projective_config, mode):
        raw = with_changes(projective_config, mode=mode, system={"initial_state": [0.0, 1.0]},
                           ensemble={"checkpoints": [1, 2], "trajectories": 20})
        stats = EnsembleRunner(config_from_mapping(raw)).run()
        assert stats.terminal_counts == [0, 20]
        assert stats.frequencies == [0.0, 1.0]
        assert stats.martingale.z == [[0.0, 0.0], [0.0, 0.0]]
        assert stats.mean_steps == 0.0
        assert acceptance(stats).passed

    def test_unterminated_runs_fail_acceptance(self, projective_config):
        raw = with_changes(projective_config, sde={"max_time": 0.05}, ensemble={"checkpoints": []})
        stats = EnsembleRunner(config_from_mapping(raw)).run()
        assert stats.unterminated > 2
        result = acceptance(stats)
        assert not result.passed
        assert "unterminated" in result.failures[0]
        assert "WARNING" in format_report(stats)

    def test_frequencies_outside_band_fail_acceptance(self, projective_config):
        stats = EnsembleRunner(config_from_mapping(projective_config)).run()
        skewed = replace(stats, terminal_counts=[200, 0], frequencies=[1.0, 0.0])
        assert not acceptance(skewed).passed
        assert "FAIL" in format_report(skewed)

    def test_summary_requires_a_run(self, projective_config):
        with pytest.raises(InvariantViolation):
            EnsembleRunner(config_from_mapping(projective_config)).summary_rows()

    @pytest.mark.parametrize("mode, system", [
        ("generalized", UNSHARP),
        ("commuting_qsd", UNSHARP),
        ("generalized", {"initial_state": ["0.6", "0.8j"], "kraus": {"family": "rotated_pair"}}),
    ])
    def test_generalized_modes(self, projective_config, mode, system):
        raw = with_changes(projective_config, mode=mode, system=system)
        stats = EnsembleRunner(config_from_mapping(raw)).run()
        assert stats.unterminated == 0
        assert acceptance(stats).passed
        assert stats.mean_fidelity >= 0.99
        if mode == "commuting_qsd":
            assert min(stats.extras["min_coupling"]) >= 0.95

    @pytest.mark.parametrize("source", [s.value for s in ExpectationSource])
    def test_commuting_qsd_sources_agree(self, projective_config, source):
        raw = with_changes(projective_config, mode="commuting_qsd", system=UNSHARP, sde={"dt": 1e-3},
                           ensemble={"trajectories": 100, "checkpoints": [0.25, 0.5], "expectation_source": source})
        stats = EnsembleRunner(config_from_mapping(raw)).run()
        assert stats.unterminated == 0
        assert stats.extras["max_source_gap"] <= 0.3


class TestStatsFiles:
    def test_round_trip(self, tmp_path, projective_config):
        stats = EnsembleRunner(config_from_mapping(projective_config)).run()
        path = tmp_path / "stats.json"
        save_stats(stats, path)
        loaded = load_stats(path)
        assert loaded == stats
        assert "wall_clock" not in json.loads(path.read_text())

    def test_rejects_other_files(self, tmp_path, projective_config):
        stats = EnsembleRunner(config_from_mapping(projective_config)).run()
        path = tmp_path / "stats.json"
        save_stats(stats, path)
        data = json.loads(path.read_text())
        for changed in ({**data, "version": 2}, {**data, "format": "other"}):
            path.write_text(json.dumps(changed))
            with pytest.raises(PersistenceError):
                load_stats(path)
        with pytest.raises(PersistenceError):
            load_stats(tmp_path / "missing.json")

    def test_report_tables(self, tmp_path, projective_config):
        stats = EnsembleRunner(config_from_mapping(projective_config)).run()
        moments, tildes = report_tables(stats)
        assert [row[0] for row in moments] == [0.5, 1.0, 2.0]
        assert len(tildes[0]) == 3
        paths = write_report_tables(stats, tmp_path)
        assert paths[1].read_text().splitlines()[0] == "t,x0,x1"
        assert "acceptance: PASS" in format_report(stats)


class TestOutputsAndReplay:
    @pytest.mark.parametrize("mode, system", [
        ("discrete", None),
        ("continuous", None),
        ("projective_qsd", None),
        ("generalized", UNSHARP),
        ("commuting_qsd", UNSHARP),
    ])
    def test_records_replay(self, tmp_path, projective_config, mode, system):
        raw = with_changes(projective_config, mode=mode,
                           ensemble={"trajectories": 20, "checkpoints": [5, 10]},
                           output={"directory": str(tmp_path / "out"), "record_trajectories": 2})
        if system:
            raw["system"] = system
        cfg = config_from_mapping(raw)
        runner = EnsembleRunner(cfg)
        written = runner.write_outputs(runner.run())
        assert [p.name for p in written] == ["stats.json", "summary.csv", "trajectories.jsonl"]
        assert len(cfg.output.summary_path.read_text().splitlines()) == 21

        records = read_records(cfg.output.trajectories_path)
        assert [r.index for r in records] == [0, 1]
        expected = ChainRecord if mode == "discrete" else Trajectory
        for record in records:
            assert isinstance(record, expected)
            replayed = replay_record(record, cfg)
            np.testing.assert_array_equal(replayed.xs, record.xs)

    def test_tampered_record_is_detected(self, projective_config):
        cfg = config_from_mapping(projective_config)
        record = EnsembleRunner(cfg).record(3)
        xs = record.xs.copy()
        xs[-1] = xs[-1][::-1]
        with pytest.raises(InvariantViolation):
            replay_record(replace(record, xs=xs), cfg)

    def test_chain_replay_needs_matching_seed(self, projective_config):
        raw = with_changes(projective_config, mode="discrete", ensemble={"checkpoints": []})
        cfg = config_from_mapping(raw)
        record = EnsembleRunner(cfg).record(0)
        other = config_from_mapping(with_changes(raw, ensemble={"master_seed": 99}))
        with pytest.raises(PersistenceError):
            replay_record(record, other)

    def test_read_records_errors(self, tmp_path):
        with pytest.raises(PersistenceError):
            read_records(tmp_path / "none.jsonl")
        path = tmp_path / "bad.jsonl"
        path.write_text("{\n")
        with pytest.raises(PersistenceError):
            read_records(path)
