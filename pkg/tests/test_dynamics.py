import numpy as np
import pytest

from services.dynamics import (LinearGaussianSSM, Lorenz96System, ObservationModel, generate_truth_and_obs,
                               observe, spin_up, step_truth, system_from_config, system_from_parameters,
                               training_pairs)
from utils.config import load_config, set_config_value
from utils.errors import ConfigError, DomainError, ShapeMismatchError, SingularCovarianceError


def test_lorenz96_fixed_point_is_stationary():
    system = Lorenz96System(dim=40, forcing=8.0)
    x = np.full(40, 8.0)
    np.testing.assert_allclose(system.tendency(x), 0.0, atol=1e-12)
    np.testing.assert_allclose(system.rk4_step(x), x, atol=1e-12)


def test_lorenz96_tendency_matches_definition():
    system = Lorenz96System(dim=5, forcing=8.0)
    x = np.arange(5, dtype=float)
    expected = np.array([(x[(i + 1) % 5] - x[i - 2]) * x[i - 1] - x[i] + 8.0 for i in range(5)])
    np.testing.assert_allclose(system.tendency(x), expected)


def test_lorenz96_step_is_cycle_of_rk4_steps():
    system = Lorenz96System(dim=8, cycle_length=10)
    x = system.initial_state()
    manual = x
    for _ in range(10):
        manual = system.rk4_step(manual)
    np.testing.assert_allclose(system.step(x), manual)


def test_lorenz96_batch_matches_rows():
    system = Lorenz96System(dim=10)
    rng = np.random.default_rng(0)
    batch = 8.0 + rng.standard_normal((3, 10))
    stepped = system.step(batch)
    for i in range(3):
        np.testing.assert_allclose(stepped[i], system.step(batch[i]))


def test_lorenz96_spin_up_leaves_fixed_point():
    system = Lorenz96System(dim=40)
    x = spin_up(system, system.initial_state(), 1000)
    assert np.all(np.isfinite(x))
    assert np.std(x) > 1.0


@pytest.mark.parametrize("kwargs", [{"dim": 3}, {"dt": 0.0}, {"cycle_length": 0}, {"model_noise_std": -1.0}])
def test_lorenz96_invalid_parameters(kwargs):
    with pytest.raises(ConfigError):
        Lorenz96System(**kwargs)


def test_lorenz96_model_noise_uses_rng():
    system = Lorenz96System(dim=8, model_noise_std=0.5)
    x = system.initial_state()
    a = system.step(x, np.random.default_rng(0))
    b = system.step(x, np.random.default_rng(1))
    assert not np.allclose(a, b)


def test_linear_gaussian_step_moments(scalar_ssm):
    rng = np.random.default_rng(7)
    x = np.full((200000, 1), 1.0)
    stepped = scalar_ssm.step(x, rng)
    assert stepped.mean() == pytest.approx(0.9, abs=5e-3)
    assert stepped.var() == pytest.approx(0.1, rel=2e-2)


def test_linear_gaussian_rejects_bad_covariance():
    with pytest.raises(SingularCovarianceError):
        LinearGaussianSSM(A=np.eye(2), Q=[[1.0, 0.5], [0.0, 1.0]], x0=np.zeros(2))
    with pytest.raises(SingularCovarianceError):
        LinearGaussianSSM(A=np.eye(2), Q=[[1.0, 0.0], [0.0, -1.0]], x0=np.zeros(2))
    with pytest.raises(ShapeMismatchError):
        LinearGaussianSSM(A=np.eye(3), Q=np.eye(2), x0=np.zeros(2))


def test_linear_gaussian_spectral_radius(lg_ssm):
    assert lg_ssm.spectral_radius == pytest.approx(0.9, abs=1e-12)


def test_strided_observation_operator():
    obs = ObservationModel.strided(40, stride=4, noise_std=0.1)
    assert obs.m == 10
    np.testing.assert_array_equal(obs.observed_indices, np.arange(0, 40, 4))
    x = np.arange(40, dtype=float)
    np.testing.assert_array_equal(obs.apply(x), x[::4])
    np.testing.assert_allclose(obs.noise_var, 0.01)


def test_observation_offset():
    obs = ObservationModel.strided(10, stride=3, offset=1)
    np.testing.assert_array_equal(obs.observed_indices, [1, 4, 7])


def test_observation_rejects_invalid():
    with pytest.raises(ShapeMismatchError):
        ObservationModel(H=np.ones((3, 2)), noise_std=0.1)
    with pytest.raises(ConfigError):
        ObservationModel(H=np.eye(2), noise_std=-0.1)
    with pytest.raises(ConfigError):
        ObservationModel.strided(4, stride=0)


def test_observe_and_step_check_dimension(lg_ssm, lg_obs, rng):
    with pytest.raises(ShapeMismatchError):
        observe(lg_obs, np.zeros(3), rng)
    with pytest.raises(ShapeMismatchError):
        step_truth(lg_ssm, np.zeros(5), rng)


@pytest.mark.parametrize("noise_std", [0.0, [0.1, 0.0, 0.1], np.inf])
def test_observation_noise_must_be_positive(noise_std):
    with pytest.raises(ConfigError) as info:
        ObservationModel.strided(6, stride=2, noise_std=noise_std)
    assert info.value.key == "observation.noise_std"


def test_observation_noise_scale(rng):
    obs = ObservationModel.strided(6, stride=2, noise_std=1e-3)
    draws = np.stack([observe(obs, np.arange(6, dtype=float), rng) for _ in range(2000)])
    np.testing.assert_allclose(draws.mean(axis=0), [0.0, 2.0, 4.0], atol=1e-4)
    np.testing.assert_allclose(draws.std(axis=0), 1e-3, rtol=0.1)


def test_generate_shapes_and_determinism(lg_ssm, lg_obs):
    first = generate_truth_and_obs(lg_ssm, lg_obs, 12, seed=3)
    second = generate_truth_and_obs(lg_ssm, lg_obs, 12, seed=3)
    assert first.truth.shape == (13, 4)
    assert first.observations.shape == (12, 2)
    assert first.steps == 12
    np.testing.assert_array_equal(first.truth[0], lg_ssm.x0)
    np.testing.assert_array_equal(first.truth, second.truth)
    np.testing.assert_array_equal(first.observations, second.observations)

    other = generate_truth_and_obs(lg_ssm, lg_obs, 12, seed=4)
    assert not np.allclose(first.truth[1:], other.truth[1:])


def test_generate_rejects_empty_and_mismatched(lg_ssm, lg_obs):
    with pytest.raises(DomainError):
        generate_truth_and_obs(lg_ssm, lg_obs, 0, seed=0)
    with pytest.raises(ShapeMismatchError):
        generate_truth_and_obs(lg_ssm, ObservationModel.strided(6, 2), 5, seed=0)


def test_training_pairs_are_transitions():
    system = Lorenz96System(dim=8)
    x_prev, x_next = training_pairs(system, 100, seed=0, n_chains=10)
    assert x_prev.shape == x_next.shape == (100, 8)
    np.testing.assert_allclose(system.step(x_prev), x_next)


def test_system_from_config_and_parameters():
    config = load_config(None, {"dynamics.system": "linear-gaussian", "dynamics.dim": 3})
    system = system_from_config(config)
    assert isinstance(system, LinearGaussianSSM)
    rebuilt = system_from_parameters(system.parameters())
    np.testing.assert_array_equal(rebuilt.A, system.A)
    np.testing.assert_array_equal(rebuilt.Q, system.Q)

    lorenz = system_from_config(load_config())
    assert isinstance(lorenz, Lorenz96System)
    assert system_from_parameters(lorenz.parameters()).parameters() == lorenz.parameters()

    with pytest.raises(ConfigError):
        system_from_config(set_config_value(config, "dynamics.system", "henon"))
