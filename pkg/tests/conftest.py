import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.append(str(Path(__file__).resolve().parent.parent))

from services.dynamics import LinearGaussianSSM, ObservationModel  # noqa: E402
from services.schedule import NoiseSchedule  # noqa: E402


@pytest.fixture
def schedule():
    return NoiseSchedule()


@pytest.fixture
def vp_schedule():
    return NoiseSchedule(kind="variance-preserving", sigma_min=0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scalar_ssm():
    """x' = 0.9 x + N(0, 0.1)"""
    return LinearGaussianSSM(A=[[0.9]], Q=[[0.1]], x0=[1.0])


@pytest.fixture
def scalar_obs():
    return ObservationModel(H=[[1.0]], noise_std=np.sqrt(0.05))


@pytest.fixture
def lg_ssm():
    """A small coupled 4-dimensional system with a non-diagonal Q"""
    A = 0.8 * np.eye(4) + 0.1 * np.roll(np.eye(4), 1, axis=1)
    L = np.array([[0.5, 0.0, 0.0, 0.0],
                  [0.1, 0.4, 0.0, 0.0],
                  [0.0, 0.2, 0.6, 0.0],
                  [0.1, 0.0, 0.1, 0.3]])
    return LinearGaussianSSM(A=A, Q=L @ L.T, x0=np.linspace(-1.0, 1.0, 4))


@pytest.fixture
def lg_obs():
    return ObservationModel.strided(4, stride=2, noise_std=0.3)


@pytest.fixture
def tmp_config(tmp_path):
    """Config file pointing the run registry into tmp_path"""
    path = tmp_path / "test_config.json"
    path.write_text('{"database": {"path": "%s"}, "run": {"progress": false, "workers": 1}}'
                    % (tmp_path / "runs.db").as_posix())
    return path
