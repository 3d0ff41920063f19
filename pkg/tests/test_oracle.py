import numpy as np
import pytest
from scipy import integrate, stats

from services.denoiser import AnalyticLGDenoiser
from services.dynamics import LinearGaussianSSM, ObservationModel, generate_truth_and_obs
from services.oracle import (KalmanState, conjugate_posterior_covariance, exact_guided_posterior,
                             exact_transition_evidence, kalman_filter, kalman_predict, kalman_update,
                             noised_marginal_logpdf, noised_marginal_score, stationary_covariance)
from services.particle_filter import log_obs_density
from utils.errors import DomainError, SingularCovarianceError


def _unit_system():
    return (LinearGaussianSSM(A=[[1.0]], Q=[[1.0]], x0=[0.0]),
            ObservationModel(H=[[1.0]], noise_std=1.0))


def test_scalar_kalman_step():
    ssm, obs = _unit_system()
    predicted = kalman_predict(KalmanState(np.zeros(1), np.zeros((1, 1))), ssm)
    assert predicted.mean[0] == 0.0
    assert predicted.covariance[0, 0] == 1.0

    updated = kalman_update(predicted, obs, np.array([2.0]))
    assert updated.mean[0] == pytest.approx(1.0)
    assert updated.covariance[0, 0] == pytest.approx(0.5)


def test_kalman_filter_starts_from_dirac():
    ssm, obs = _unit_system()
    states = kalman_filter(ssm, obs, np.zeros(1), np.array([[2.0], [1.0]]))
    assert len(states) == 3
    assert states[0].covariance[0, 0] == 0.0
    assert states[1].mean[0] == pytest.approx(1.0)
    assert states[1].covariance[0, 0] == pytest.approx(0.5)


def test_uninformative_observation_is_noop(lg_ssm):
    obs = ObservationModel.strided(4, stride=2, noise_std=1e9)
    prior = kalman_predict(KalmanState(lg_ssm.x0, np.zeros((4, 4))), lg_ssm)
    updated = kalman_update(prior, obs, np.array([5.0, 5.0]))
    np.testing.assert_allclose(updated.mean, prior.mean, atol=1e-12)
    np.testing.assert_allclose(updated.covariance, prior.covariance, atol=1e-12)


def test_near_exact_observation_recovers_state(lg_ssm):
    obs = ObservationModel(H=np.eye(4), noise_std=1e-8)
    y = np.array([0.3, -0.2, 1.1, 0.0])
    posterior = exact_guided_posterior(lg_ssm, obs, lg_ssm.x0, y)
    np.testing.assert_allclose(posterior.mean, y, atol=1e-8)
    np.testing.assert_allclose(posterior.covariance, 0.0, atol=1e-10)


def test_covariance_stays_symmetric(lg_ssm, lg_obs):
    data = generate_truth_and_obs(lg_ssm, lg_obs, 30, seed=2)
    for state in kalman_filter(lg_ssm, lg_obs, lg_ssm.x0, data.observations):
        np.testing.assert_allclose(state.covariance, state.covariance.T, atol=1e-12)
        assert np.all(state.std >= 0)


def test_singular_innovation_rejected():
    ssm = LinearGaussianSSM(A=[[1.0]], Q=[[1.0]], x0=[0.0])
    obs = ObservationModel(H=[[1.0]], noise_std=1e-200)
    with pytest.raises(SingularCovarianceError):
        kalman_update(KalmanState(np.zeros(1), np.zeros((1, 1))), obs, np.array([1.0]))


def test_one_filter_step_is_guided_posterior(lg_ssm, lg_obs):
    y = np.array([[0.4, -0.6]])
    states = kalman_filter(lg_ssm, lg_obs, lg_ssm.x0, y)
    posterior = exact_guided_posterior(lg_ssm, lg_obs, lg_ssm.x0, y[0])
    np.testing.assert_allclose(states[1].mean, posterior.mean)
    np.testing.assert_allclose(states[1].covariance, posterior.covariance)


def test_evidence_matches_quadrature(scalar_ssm, scalar_obs):
    x_prev, y = 1.0, 1.7

    def integrand(x):
        return (stats.norm.pdf(y, loc=x, scale=scalar_obs.noise_std[0])
                * stats.norm.pdf(x, loc=0.9 * x_prev, scale=np.sqrt(0.1)))

    value, _ = integrate.quad(integrand, -10.0, 10.0, epsabs=1e-13, epsrel=1e-12)
    assert exact_transition_evidence(scalar_ssm, scalar_obs, np.array([x_prev]), np.array([y])) == \
        pytest.approx(np.log(value), rel=1e-8)


def test_evidence_reduces_to_dirac_weight_without_model_noise(lg_obs):
    ssm = LinearGaussianSSM(A=0.7 * np.eye(4), Q=1e-14 * np.eye(4), x0=np.ones(4))
    y = np.array([0.5, 1.5])
    exact = exact_transition_evidence(ssm, lg_obs, ssm.x0, y)
    assert exact == pytest.approx(float(log_obs_density(lg_obs, y, ssm.A @ ssm.x0)), rel=1e-9)


def test_evidence_rotation_invariant():
    theta = 0.7
    R = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    A = np.array([[0.9, 0.2], [0.0, 0.5]])
    Q = np.array([[0.3, 0.1], [0.1, 0.2]])
    H = np.array([[1.0, 0.5]])
    x_prev, y = np.array([0.4, -1.0]), np.array([0.3])

    original = exact_transition_evidence(LinearGaussianSSM(A=A, Q=Q, x0=np.zeros(2)),
                                         ObservationModel(H=H, noise_std=0.4), x_prev, y)
    rotated = exact_transition_evidence(LinearGaussianSSM(A=R @ A @ R.T, Q=R @ Q @ R.T, x0=np.zeros(2)),
                                        ObservationModel(H=H @ R.T, noise_std=0.4), R @ x_prev, y)
    assert rotated == pytest.approx(original, rel=1e-12)


def test_guided_posterior_matches_grid_quadrature():
    A = np.array([[0.9, 0.1], [0.0, 0.8]])
    Q = np.array([[0.2, 0.05], [0.05, 0.1]])
    ssm = LinearGaussianSSM(A=A, Q=Q, x0=np.zeros(2))
    obs = ObservationModel(H=[[1.0, 0.0]], noise_std=0.3)
    x_prev, y = np.array([1.0, -0.5]), np.array([1.2])

    prior_mean = A @ x_prev
    axis0 = np.linspace(prior_mean[0] - 3.0, prior_mean[0] + 3.0, 601)
    axis1 = np.linspace(prior_mean[1] - 3.0, prior_mean[1] + 3.0, 601)
    grid = np.stack(np.meshgrid(axis0, axis1, indexing="ij"), axis=-1).reshape(-1, 2)
    log_weight = (stats.multivariate_normal.logpdf(grid, mean=prior_mean, cov=Q)
                  + stats.norm.logpdf(y[0], loc=grid[:, 0], scale=0.3))
    weight = np.exp(log_weight - log_weight.max())
    weight /= weight.sum()
    mean = weight @ grid
    centered = grid - mean
    cov = (weight[:, None] * centered).T @ centered

    posterior = exact_guided_posterior(ssm, obs, x_prev, y)
    np.testing.assert_allclose(posterior.mean, mean, atol=1e-5)
    np.testing.assert_allclose(posterior.covariance, cov, atol=1e-5)


def test_prior_recovered_for_uninformative_observation(lg_ssm):
    obs = ObservationModel.strided(4, stride=1, noise_std=1e9)
    posterior = exact_guided_posterior(lg_ssm, obs, lg_ssm.x0, np.zeros(4))
    np.testing.assert_allclose(posterior.mean, lg_ssm.A @ lg_ssm.x0, atol=1e-10)
    np.testing.assert_allclose(posterior.covariance, lg_ssm.Q, atol=1e-10)


def test_noised_score_is_gradient_of_logpdf(lg_ssm, schedule, rng):
    x_t = rng.standard_normal(4)
    h = 1e-6
    fd = np.array([(noised_marginal_logpdf(lg_ssm, schedule, x_t + h * e, lg_ssm.x0, 0.2)
                    - noised_marginal_logpdf(lg_ssm, schedule, x_t - h * e, lg_ssm.x0, 0.2)) / (2 * h)
                   for e in np.eye(4)])
    np.testing.assert_allclose(noised_marginal_score(lg_ssm, schedule, x_t, lg_ssm.x0, 0.2), fd,
                               rtol=1e-5, atol=1e-7)


def test_conjugate_covariance_is_scaled_denoiser_jacobian(lg_ssm, schedule):
    alpha, sigma, _, _ = schedule.coefficients(0.35)
    jacobian = AnalyticLGDenoiser(lg_ssm, schedule).jacobian(0.35)
    np.testing.assert_allclose(conjugate_posterior_covariance(lg_ssm, schedule, 0.35),
                               sigma**2 / alpha * jacobian, atol=1e-12)


def test_stationary_covariance(lg_ssm):
    P = stationary_covariance(lg_ssm)
    np.testing.assert_allclose(P, lg_ssm.A @ P @ lg_ssm.A.T + lg_ssm.Q, atol=1e-12)

    with pytest.raises(DomainError):
        stationary_covariance(LinearGaussianSSM(A=[[1.0]], Q=[[1.0]], x0=[0.0]))
