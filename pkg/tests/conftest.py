import numpy as np
import pytest
import yaml

from weakmeaspy import QuantumState, projective_basis, rotated_pair, unsharp_qubit


@pytest.fixture
def rng():
    return np.random.default_rng(20240517)


@pytest.fixture
def qubit_projectors():
    return projective_basis(2)


@pytest.fixture
def qutrit_projectors():
    return projective_basis(3)


@pytest.fixture
def psi_03():
    """Qubit state with Born probabilities (0.3, 0.7) in the computational basis."""
    return QuantumState.pure([np.sqrt(0.3), np.sqrt(0.7)])


@pytest.fixture
def psi_plus():
    return QuantumState.pure([1, 1], normalize=True)


@pytest.fixture
def unsharp():
    return unsharp_qubit(0.3)


@pytest.fixture
def rotated():
    return rotated_pair()


@pytest.fixture
def write_config(tmp_path):
    """Writes a config mapping to tmp_path/<name>.yaml and returns the path."""
    def write(mapping, name="experiment"):
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump(mapping))
        return path
    return write


@pytest.fixture
def projective_config():
    return {
        "mode": "continuous",
        "system": {"initial_state": [float(np.sqrt(0.3)), float(np.sqrt(0.7))], "kraus": {"family": "projective"}},
        "sde": {"dt": 0.01, "eps_stop": 0.001},
        "ensemble": {"trajectories": 200, "master_seed": 3, "batch_size": 50, "checkpoints": [0.5, 1.0, 2.0]},
    }
