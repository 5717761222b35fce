import numpy as np
import pytest

from weakmeaspy import ExpectationSource, GaussianNoise, KrausSet, MeasurementMap, OperatorDomainError, \
    QuantumState, SdeConfig, SimplexDomainError, SimplexPoint, a_operators, commuting_structure, f_factor, fidelity, \
    generalized_batch, identity, lambda_map, measurement_map, projective_basis, pullback_state, qsd_density_increment, \
    qsd_increment, qsd_step, random_kraus, random_state, run_commuting_qsd, run_generalized, strong_targets, \
    trajectory_rng, upsilon, vertex

EYE2 = np.eye(2)


def noise(seed, trajectories, n, dt):
    return GaussianNoise([trajectory_rng(seed, i) for i in range(trajectories)], n, dt)


class TestMeasurementMap:
    def test_endpoints(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            d, n = int(rng.integers(2, 9)), int(rng.integers(2, 7))
            kraus = random_kraus(d, n, rng)
            mmap = MeasurementMap(kraus)
            np.testing.assert_allclose(measurement_map(identity(n), mmap), np.eye(d), atol=1e-9)
            for k in range(n):
                np.testing.assert_allclose(measurement_map(vertex(n, k), mmap), kraus[k], atol=1e-9)

    def test_rotated_pair_endpoints(self, rotated):
        mmap = MeasurementMap(rotated)
        np.testing.assert_allclose(measurement_map(vertex(2, 0), mmap), rotated[0], atol=1e-9)
        np.testing.assert_allclose(measurement_map(vertex(2, 1), mmap), rotated[1], atol=1e-9)

    def test_projective_map(self):
        mmap = MeasurementMap(projective_basis(2))
        x = SimplexPoint([0.8, 0.2])
        np.testing.assert_allclose(upsilon(x, mmap), EYE2, atol=1e-12)
        expected = np.sqrt(f_factor(x)) * np.diag([np.sqrt(0.8), np.sqrt(0.2)])
        np.testing.assert_allclose(measurement_map(x, mmap), expected, atol=1e-12)

    def test_positive_sets_have_no_unitary_part(self, rng, unsharp):
        mmap = MeasurementMap(unsharp)
        for _ in range(5):
            x = SimplexPoint.from_unnormalized(rng.uniform(0.05, 1.0, 2))
            np.testing.assert_allclose(upsilon(x, mmap), EYE2, atol=1e-12)

    def test_scalar_set(self):
        mmap = MeasurementMap(KrausSet([np.sqrt(0.3) * EYE2, np.sqrt(0.7) * EYE2]))
        x = SimplexPoint([0.25, 0.75])
        scale = np.sqrt(f_factor(x) * (0.25 * 0.3 + 0.75 * 0.7))
        np.testing.assert_allclose(lambda_map(x, mmap), scale * EYE2, atol=1e-12)

    def test_upsilon_is_unitary(self, rotated):
        mmap = MeasurementMap(rotated)
        u = upsilon(SimplexPoint([0.35, 0.65]), mmap)
        np.testing.assert_allclose(u @ u.conj().T, EYE2, atol=1e-12)
        lam = lambda_map(SimplexPoint([0.35, 0.65]), mmap)
        np.testing.assert_allclose(lam, lam.conj().T, atol=1e-12)
        assert np.linalg.eigvalsh(lam).min() >= 0.0

    @pytest.mark.parametrize("d, n", [(2, 2), (3, 3), (4, 3)])
    def test_lambda_is_positive_definite_inside(self, rng, d, n):
        mmap = MeasurementMap(random_kraus(d, n, rng))
        grid = np.linspace(0.05, 0.95, 7)
        for point in np.array(np.meshgrid(*[grid] * (n - 1))).reshape(n - 1, -1).T:
            if point.sum() >= 1.0:
                continue
            x = SimplexPoint(np.append(point, 1.0 - point.sum()))
            lam = lambda_map(x, mmap)
            np.testing.assert_allclose(lam, lam.conj().T, atol=1e-12)
            assert np.linalg.eigvalsh(lam).min() > 0.0

    @pytest.mark.parametrize("n", [2, 3, 5])
    def test_f_factor(self, n):
        assert f_factor(identity(n)) == pytest.approx(n)
        assert f_factor(vertex(n, n - 1)) == 1.0

    def test_needs_two_outcomes(self):
        with pytest.raises(SimplexDomainError):
            MeasurementMap(KrausSet([EYE2]))


class TestPullback:
    def test_identity_returns_initial_state(self, rotated):
        psi0 = QuantumState.pure([0.6, 0.8j])
        assert fidelity(pullback_state(identity(2), psi0, MeasurementMap(rotated)), psi0) == pytest.approx(1.0)

    @pytest.mark.parametrize("family", ["unsharp", "rotated"])
    def test_vertices_give_strong_targets(self, request, family):
        kraus = request.getfixturevalue(family)
        psi0 = QuantumState.pure([0.6, 0.8j])
        mmap = MeasurementMap(kraus)
        for k, target in enumerate(strong_targets(psi0, kraus)):
            assert fidelity(pullback_state(vertex(2, k), psi0, mmap), target) == pytest.approx(1.0, abs=1e-10)

    def test_density_matrix_input(self, unsharp, psi_plus):
        rho = QuantumState.density(psi_plus.density_matrix())
        mmap = MeasurementMap(unsharp)
        x = SimplexPoint([0.7, 0.3])
        mixed = pullback_state(x, rho, mmap)
        pure = pullback_state(x, psi_plus, mmap)
        np.testing.assert_allclose(mixed.density_matrix(), pure.density_matrix(), atol=1e-12)

    def test_impossible_target(self):
        targets = strong_targets(QuantumState.basis(2, 0), projective_basis(2))
        assert targets[1] is None


class TestGeneralizedRuns:
    def test_single_run(self, psi_plus, unsharp):
        cfg = SdeConfig(dt=0.01, max_time=100.0, record_every=10)
        outcome = run_generalized(psi_plus, unsharp, cfg, trajectory_rng(31, 0), seed=31, index=0)
        assert outcome.terminated
        assert outcome.fidelity_to_target >= 0.999
        assert len(outcome.trajectory.states) == len(outcome.trajectory.xs)
        assert fidelity(outcome.trajectory.state_at(0), psi_plus) == pytest.approx(1.0)

    @pytest.mark.parametrize("family, psi", [("unsharp", [1.0, 1.0]), ("rotated", [0.6, 0.8j])])
    def test_ensemble(self, request, family, psi):
        kraus = request.getfixturevalue(family)
        psi0 = QuantumState.pure(psi, normalize=True)
        p0 = kraus.born_probabilities(psi0)
        result = generalized_batch(psi0, MeasurementMap(kraus), SdeConfig(dt=0.01, max_time=100.0),
                                   noise(32, 400, 2, 0.01))
        assert (result.terminal >= 0).all()
        freq = np.bincount(result.terminal, minlength=2) / 400
        assert abs(freq[0] - p0[0]) <= 4 * np.sqrt(p0[0] * p0[1] / 400)
        assert (result.target_fidelity >= 0.999).mean() >= 0.99


class TestCommutingStructure:
    def test_unsharp(self, unsharp):
        structure = commuting_structure(unsharp)
        for j in range(2):
            rebuilt = structure.basis @ np.diag(structure.eigenvalues[j]) @ structure.basis.conj().T
            np.testing.assert_allclose(rebuilt, unsharp[j], atol=1e-12)

    def test_rejects_non_commuting(self, rotated):
        with pytest.raises(OperatorDomainError):
            commuting_structure(rotated)

    def test_a_operators_at_identity(self, unsharp):
        a = a_operators(identity(2), unsharp)
        for j in range(2):
            np.testing.assert_allclose(a[j], 2 * unsharp[j] @ unsharp[j], atol=1e-12)


class TestQsd:
    def test_eigenstate_is_fixed(self, rng, unsharp):
        psi = QuantumState.basis(2, 0)
        d_psi, _ = qsd_increment(psi, SimplexPoint([0.35, 0.65]), unsharp, 0.01, rng.normal(0.0, 0.1, 2))
        np.testing.assert_allclose(d_psi, 0.0, atol=1e-14)

    def test_step_keeps_norm_and_simplex(self, rng, unsharp, psi_plus):
        psi, x = psi_plus, identity(2)
        structure = commuting_structure(unsharp)
        for _ in range(50):
            psi, x = qsd_step(psi, x, structure, 0.01, rng.normal(0.0, 0.1, 2))
        assert np.linalg.norm(psi.vector) == pytest.approx(1.0)
        assert x.components.sum() == pytest.approx(1.0)

    def test_initial_source_needs_p0(self, unsharp, psi_plus):
        with pytest.raises(OperatorDomainError):
            qsd_increment(psi_plus, identity(2), unsharp, 0.01, [0.0, 0.0], source=ExpectationSource.INITIAL)

    def test_sources_agree_on_pulled_back_states(self, rng, unsharp, psi_plus):
        mmap = MeasurementMap(unsharp)
        p0 = SimplexPoint(unsharp.born_probabilities(psi_plus))
        for _ in range(10):
            x = SimplexPoint.from_unnormalized(rng.uniform(0.05, 1.0, 2))
            psi = pullback_state(x, psi_plus, mmap)
            dw = rng.normal(0.0, 0.1, 2)
            _, dx_state = qsd_increment(psi, x, unsharp, 0.01, dw)
            _, dx_initial = qsd_increment(psi, x, unsharp, 0.01, dw, source=ExpectationSource.INITIAL, p0=p0)
            np.testing.assert_allclose(dx_state, dx_initial, atol=1e-12)

    def test_density_form_matches_pure_state_updates(self, unsharp):
        """Averaging the normalized pure-state step over +-sqrt(n dt) kicks reproduces the density increment."""
        dt, n = 1e-6, 2
        psi = QuantumState.pure([0.6, 0.8j])
        x = SimplexPoint([0.35, 0.65])
        rho = psi.density_matrix()
        drift = qsd_density_increment(psi, x, unsharp, dt, np.zeros(n))

        def updated(dw):
            d_psi, _ = qsd_increment(psi, x, unsharp, dt, dw)
            moved = psi.vector + d_psi
            moved = moved / np.linalg.norm(moved)
            return np.outer(moved, moved.conj())

        mean = np.zeros_like(rho)
        for alpha in range(n):
            kick = np.sqrt(n * dt) * np.eye(n)[alpha]
            plus, minus = updated(kick), updated(-kick)
            mean += (plus + minus - 2 * rho) / (2 * n)
            odd = 0.5 * (plus - minus)
            expected = qsd_density_increment(psi, x, unsharp, dt, kick) - drift
            assert np.linalg.norm(odd - expected) <= 1e-3 * np.linalg.norm(expected)
        assert np.linalg.norm(mean - drift) <= 1e-3 * np.linalg.norm(drift)

    def test_density_increment_is_traceless_and_hermitian(self, rng, unsharp, psi_plus):
        increment = qsd_density_increment(psi_plus, SimplexPoint([0.4, 0.6]), unsharp, 0.01, rng.normal(0.0, 0.1, 2))
        assert abs(np.trace(increment)) <= 1e-14
        np.testing.assert_allclose(increment, increment.conj().T, atol=1e-14)


class TestCommutingQsdRuns:
    @pytest.mark.parametrize("source", list(ExpectationSource))
    def test_state_follows_the_pullback(self, unsharp, psi_plus, source):
        cfg = SdeConfig(dt=1e-3, max_time=50.0)
        result = run_commuting_qsd(psi_plus, unsharp, cfg, noise(33, 16, 2, cfg.dt), source=source,
                                   checkpoints=[0.25, 0.5])
        assert result.checkpoint_coupling.mean() >= 0.99
        assert result.final_coupling.mean() >= 0.99
        assert result.source_gap.max() <= 0.3

    def test_terminal_frequencies(self, unsharp):
        psi0 = random_state(2, np.random.default_rng(5))
        p0 = unsharp.born_probabilities(psi0)
        result = run_commuting_qsd(psi0, unsharp, SdeConfig(dt=0.01, max_time=100.0), noise(34, 300, 2, 0.01))
        assert (result.terminal >= 0).all()
        freq = np.bincount(result.terminal, minlength=2) / 300
        assert abs(freq[0] - p0[0]) <= 4 * np.sqrt(p0[0] * p0[1] / 300)
        assert np.median(result.target_fidelity) >= 0.99

    def test_records_states(self, unsharp, psi_plus):
        result = run_commuting_qsd(psi_plus, unsharp, SdeConfig(dt=0.01, max_time=100.0, record_every=5),
                                   noise(35, 2, 2, 0.01), record=True)
        for record in result.records:
            assert len(record["states"]) == len(record["xs"])
            np.testing.assert_allclose(record["states"][0], psi_plus.vector, atol=1e-12)
