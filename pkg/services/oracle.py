"""Exact Gaussian references for the linear-Gaussian system.

Dense linear algebra only; used by the tests and by the assimilate command to
report Kalman diagnostics on linear-Gaussian datasets.
"""

from dataclasses import dataclass
from typing import List

import numpy as np
from scipy import linalg
from scipy.stats import multivariate_normal

from services.dynamics import LinearGaussianSSM, ObservationModel
from services.schedule import NoiseSchedule
from utils.errors import DomainError, SingularCovarianceError


@dataclass
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        self.covariance = 0.5 * (cov + cov.T)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def _cholesky(matrix: np.ndarray, what: str):
    try:
        return linalg.cho_factor(matrix, lower=True)
    except linalg.LinAlgError:
        raise SingularCovarianceError(f"{what} is not positive definite")


def kalman_predict(state: KalmanState, ssm: LinearGaussianSSM) -> KalmanState:
    A = ssm.A
    return KalmanState(A @ state.mean, A @ state.covariance @ A.T + ssm.Q)


def kalman_update(state: KalmanState, obs: ObservationModel, y: np.ndarray) -> KalmanState:
    """Gain-form update with a Cholesky solve on the innovation covariance"""
    H = obs.H
    innovation_cov = H @ state.covariance @ H.T + obs.covariance
    factor = _cholesky(innovation_cov, "Innovation covariance")
    gain = linalg.cho_solve(factor, H @ state.covariance).T
    mean = state.mean + gain @ (np.asarray(y) - H @ state.mean)
    covariance = state.covariance - gain @ innovation_cov @ gain.T
    return KalmanState(mean, covariance)


def kalman_filter(ssm: LinearGaussianSSM, obs: ObservationModel, x0: np.ndarray,
                  observations: np.ndarray) -> List[KalmanState]:
    """Filtering distributions p(x^k | y^{1:k}) for k = 0..K, starting from a Dirac at x0"""
    d = ssm.dim
    states = [KalmanState(np.asarray(x0, dtype=np.float64), np.zeros((d, d)))]
    for y in np.atleast_2d(observations):
        states.append(kalman_update(kalman_predict(states[-1], ssm), obs, y))
    return states


def exact_transition_evidence(ssm: LinearGaussianSSM, obs: ObservationModel, x_prev: np.ndarray,
                              y: np.ndarray) -> float:
    """log p(y^{k+1} | x^k) = log N(y | H A x_prev, H Q H^T + Sigma_y)"""
    H = obs.H
    mean = H @ ssm.A @ np.asarray(x_prev)
    cov = H @ ssm.Q @ H.T + obs.covariance
    return float(multivariate_normal.logpdf(y, mean=mean, cov=cov))


def exact_guided_posterior(ssm: LinearGaussianSSM, obs: ObservationModel, x_prev: np.ndarray,
                           y: np.ndarray) -> KalmanState:
    """Optimal proposal p(x^{k+1} | x^k, y^{k+1})"""
    prior = KalmanState(ssm.A @ np.asarray(x_prev), ssm.Q)
    return kalman_update(prior, obs, y)


def _noised_covariance(ssm: LinearGaussianSSM, schedule: NoiseSchedule, t: float):
    alpha, sigma, _, _ = schedule.coefficients(t)
    return alpha, alpha**2 * ssm.Q + sigma**2 * np.eye(ssm.dim)


def noised_marginal_logpdf(ssm: LinearGaussianSSM, schedule: NoiseSchedule, x_t: np.ndarray,
                           x_prev: np.ndarray, t: float) -> np.ndarray:
    """log N(x_t | alpha A x_prev, alpha^2 Q + sigma^2 I)"""
    alpha, cov = _noised_covariance(ssm, schedule, t)
    return multivariate_normal.logpdf(x_t, mean=alpha * ssm.A @ np.asarray(x_prev), cov=cov)


def noised_marginal_score(ssm: LinearGaussianSSM, schedule: NoiseSchedule, x_t: np.ndarray,
                          x_prev: np.ndarray, t: float) -> np.ndarray:
    """Gradient of noised_marginal_logpdf with respect to x_t"""
    alpha, cov = _noised_covariance(ssm, schedule, t)
    residual = np.asarray(x_t) - alpha * (np.asarray(x_prev) @ ssm.A.T)
    factor = _cholesky(cov, "Noised marginal covariance")
    flat = residual.reshape(-1, ssm.dim)
    return -linalg.cho_solve(factor, flat.T).T.reshape(residual.shape)


def _conjugate_terms(ssm: LinearGaussianSSM, schedule: NoiseSchedule, x_t: np.ndarray,
                     x_prev: np.ndarray, t: float):
    alpha, sigma, _, _ = schedule.coefficients(t)
    if not sigma > 0:
        raise DomainError(f"sigma_t must be positive, got {sigma}")
    q_inv = np.linalg.inv(ssm.Q)
    post_cov = np.linalg.inv(q_inv + (alpha**2 / sigma**2) * np.eye(ssm.dim))
    post_cov = 0.5 * (post_cov + post_cov.T)
    mean = (np.asarray(x_prev) @ (post_cov @ q_inv @ ssm.A).T
            + (alpha / sigma**2) * (np.asarray(x_t) @ post_cov.T))
    jacobian = (alpha / sigma**2) * post_cov
    return mean, jacobian, post_cov


def exact_likelihood_score(ssm: LinearGaussianSSM, obs: ObservationModel, schedule: NoiseSchedule,
                           y: np.ndarray, x_t: np.ndarray, x_prev: np.ndarray, t: float) -> np.ndarray:
    """grad_{x_t} log N(y | H x_hat(x_t), Sigma_y + H V H^T) with V held fixed"""
    mean, jacobian, post_cov = _conjugate_terms(ssm, schedule, x_t, x_prev, t)
    H = obs.H
    innovation_cov = obs.covariance + H @ post_cov @ H.T
    factor = _cholesky(innovation_cov, "Guidance innovation covariance")
    residual = (np.asarray(y) - mean @ H.T).reshape(-1, obs.m)
    solved = linalg.cho_solve(factor, residual.T).T
    return (solved @ H @ jacobian).reshape(np.shape(mean))


def conjugate_posterior_covariance(ssm: LinearGaussianSSM, schedule: NoiseSchedule, t: float) -> np.ndarray:
    """Cov[x^{k+1} | x^k, x_t^{k+1}], which does not depend on the conditioning values"""
    d = ssm.dim
    return _conjugate_terms(ssm, schedule, np.zeros(d), np.zeros(d), t)[2]


def stationary_covariance(ssm: LinearGaussianSSM) -> np.ndarray:
    """P solving P = A P A^T + Q"""
    if ssm.spectral_radius >= 1.0:
        raise DomainError(f"No stationary covariance for spectral radius {ssm.spectral_radius:.3f}")
    return linalg.solve_discrete_lyapunov(ssm.A, ssm.Q)
