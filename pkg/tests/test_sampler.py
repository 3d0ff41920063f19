import numpy as np
import pytest

from services.denoiser import AnalyticLGDenoiser
from services.oracle import noised_marginal_score
from services.sampler import (SamplerConfig, ScoreSource, adams_bashforth_weights, langevin_correction,
                              reverse_sde_solve, sample_prior_noise)
from services.schedule import NoiseSchedule
from utils.errors import ConfigError, DomainError, NonFiniteStateError
from utils.rng import particle_streams


def _exact_score(ssm, schedule):
    def score(x_t, x_prev, t):
        return noised_marginal_score(ssm, schedule, x_t, x_prev, t)
    return score


def _zero_score(x_t, x_prev, t):
    return np.zeros_like(x_t)


def test_prior_noise_scale(schedule):
    draws = sample_prior_noise(schedule, (100000, 1), np.random.default_rng(0))
    assert draws.std() == pytest.approx(100.0, rel=0.02)


def test_prior_noise_reproducible(schedule):
    a = sample_prior_noise(schedule, 5, np.random.default_rng(3))
    b = sample_prior_noise(schedule, 5, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_degenerate_noise_scale_rejected():
    with pytest.raises(ConfigError):
        NoiseSchedule(sigma_min=0.0)
    with pytest.raises(ConfigError):
        NoiseSchedule(sigma_max=0.0)


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(n_steps=3)
    with pytest.raises(ConfigError):
        SamplerConfig(eta=-0.1)
    with pytest.raises(ConfigError):
        SamplerConfig(n_corrections=-1)


def test_adams_bashforth_uniform_weights():
    h = 0.1
    np.testing.assert_allclose(adams_bashforth_weights([0.5], 0.4), [-h])
    np.testing.assert_allclose(adams_bashforth_weights([0.5, 0.6], 0.4), -h * np.array([3 / 2, -1 / 2]))
    np.testing.assert_allclose(adams_bashforth_weights([0.5, 0.6, 0.7], 0.4),
                               -h * np.array([23 / 12, -16 / 12, 5 / 12]), rtol=1e-12)


def test_adams_bashforth_single_node_is_euler():
    np.testing.assert_allclose(adams_bashforth_weights([0.7], 0.25), [0.25 - 0.7])
    np.testing.assert_allclose(adams_bashforth_weights([1.0], 0.975), [-0.025])


def test_adams_bashforth_exact_for_quadratics_on_uneven_nodes():
    nodes = [0.31, 0.47, 0.8]
    weights = adams_bashforth_weights(nodes, 0.12)
    exact = (0.12**3 - 0.31**3) / 3.0
    assert weights @ np.square(nodes) == pytest.approx(exact, rel=1e-12)


def test_adams_bashforth_rejects_duplicate_nodes():
    with pytest.raises(DomainError):
        adams_bashforth_weights([0.5, 0.5], 0.4)


def test_zero_score_leaves_noise_unchanged(schedule):
    cfg = SamplerConfig(n_steps=40, eta=0.0, n_corrections=0)
    x_init = np.random.default_rng(0).standard_normal((3, 5)) * 100.0
    out = reverse_sde_solve(_zero_score, np.zeros(5), cfg, schedule, np.random.default_rng(1), x_init=x_init)
    np.testing.assert_array_equal(out, x_init)


def test_unconditional_lg_moments_probability_flow(scalar_ssm, schedule):
    cfg = SamplerConfig(n_steps=80, eta=0.0, n_corrections=0)
    x_prev = np.array([1.0])
    out = reverse_sde_solve(_exact_score(scalar_ssm, schedule), x_prev, cfg, schedule,
                            np.random.default_rng(11), batch=8192)
    std_err = np.sqrt(0.1 / 8192)
    assert out.shape == (8192, 1)
    assert abs(out.mean() - 0.9) < 4 * std_err
    assert out.var(ddof=1) == pytest.approx(0.1, rel=0.1)


def test_unconditional_lg_moments_analytic_denoiser(lg_ssm, schedule):
    cfg = SamplerConfig(n_steps=80, eta=0.0, n_corrections=0)
    den = AnalyticLGDenoiser(lg_ssm, schedule)
    x_prev = lg_ssm.x0
    out = reverse_sde_solve(ScoreSource(den, schedule), x_prev, cfg, schedule, np.random.default_rng(5),
                            batch=8192)
    std_err = np.sqrt(np.diag(lg_ssm.Q) / 8192)
    assert np.all(np.abs(out.mean(axis=0) - lg_ssm.A @ x_prev) < 4 * std_err)
    np.testing.assert_allclose(out.var(axis=0, ddof=1), np.diag(lg_ssm.Q), rtol=0.1)


@pytest.mark.parametrize("seed", [21, 22])
def test_unconditional_lg_moments_default_sampler(scalar_ssm, schedule, seed):
    den = AnalyticLGDenoiser(scalar_ssm, schedule)
    out = reverse_sde_solve(ScoreSource(den, schedule), np.array([1.0]), SamplerConfig(), schedule,
                            np.random.default_rng(seed), batch=4096)
    assert abs(out.mean() - 0.9) < 4 * np.sqrt(0.1 / 4096)
    assert out.var(ddof=1) == pytest.approx(0.1, rel=0.1)


def test_stochastic_and_deterministic_means_agree(scalar_ssm, schedule):
    score = _exact_score(scalar_ssm, schedule)
    stochastic = reverse_sde_solve(score, np.array([1.0]), SamplerConfig(eta=1.0), schedule,
                                   np.random.default_rng(2), batch=4096)
    deterministic = reverse_sde_solve(score, np.array([1.0]), SamplerConfig(eta=0.0, n_corrections=0),
                                      schedule, np.random.default_rng(3), batch=4096)
    spread = np.sqrt(stochastic.var() / 4096 + deterministic.var() / 4096)
    assert abs(stochastic.mean() - deterministic.mean()) < 4 * spread


def test_step_refinement_converges(lg_ssm, schedule):
    score = _exact_score(lg_ssm, schedule)
    x_init = np.random.default_rng(4).standard_normal(4) * schedule.sigma_1
    outputs = [reverse_sde_solve(score, lg_ssm.x0, SamplerConfig(n_steps=n, eta=0.0, n_corrections=0),
                                 schedule, x_init=x_init) for n in (20, 40, 80)]
    coarse = np.linalg.norm(outputs[0] - outputs[1])
    fine = np.linalg.norm(outputs[1] - outputs[2])
    assert fine < coarse


def test_solve_reproducible_for_fixed_seed(lg_ssm, schedule):
    score = _exact_score(lg_ssm, schedule)
    cfg = SamplerConfig(n_steps=10)
    a = reverse_sde_solve(score, lg_ssm.x0, cfg, schedule, np.random.default_rng(9))
    b = reverse_sde_solve(score, lg_ssm.x0, cfg, schedule, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


def test_per_particle_streams_match_individual_solves(lg_ssm, schedule):
    score = ScoreSource(AnalyticLGDenoiser(lg_ssm, schedule), schedule)
    cfg = SamplerConfig(n_steps=8)
    x_prev = np.random.default_rng(0).standard_normal((3, 4))
    batched = reverse_sde_solve(score, x_prev, cfg, schedule, particle_streams(7, 1, 2, 3))
    for i, rng in enumerate(particle_streams(7, 1, 2, 3)):
        np.testing.assert_allclose(batched[i], reverse_sde_solve(score, x_prev[i], cfg, schedule, rng),
                                   atol=1e-12)


def test_non_finite_state_reports_particle(schedule):
    def broken(x_t, x_prev, t):
        out = np.zeros_like(x_t)
        out[1] = np.nan
        return out

    with pytest.raises(NonFiniteStateError) as info:
        reverse_sde_solve(broken, np.zeros((3, 2)), SamplerConfig(n_steps=5), schedule,
                          np.random.default_rng(0))
    assert info.value.step == 0
    assert info.value.particle == 1
    assert 0.0 <= info.value.t < 1.0


def test_langevin_zero_scale_is_identity(schedule):
    x = np.arange(4.0)
    assert langevin_correction(x, np.ones(4), 0.5, schedule, 0.0, np.random.default_rng(0)) is x


def test_langevin_reproducible(schedule):
    x = np.arange(4.0)
    a = langevin_correction(x, -x, 0.5, schedule, 0.5, np.random.default_rng(1))
    b = langevin_correction(x, -x, 0.5, schedule, 0.5, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


@pytest.mark.slow
def test_langevin_preserves_gaussian_variance(schedule):
    t = 0.3
    sigma = schedule.sigma(t)
    rng = np.random.default_rng(8)
    x = sigma * rng.standard_normal(10000)
    for _ in range(1000):
        x = langevin_correction(x, -x / sigma**2, t, schedule, 0.01, rng)
    assert x.var() == pytest.approx(sigma**2, rel=0.05)


@pytest.mark.parametrize("scale", [0.5, 0.2])
def test_langevin_stationary_variance_inflation(schedule, scale):
    t = 0.3
    sigma = schedule.sigma(t)
    rng = np.random.default_rng(9)
    x = sigma * rng.standard_normal(40000)
    for _ in range(200):
        x = langevin_correction(x, -x / sigma**2, t, schedule, scale, rng)
    assert x.var() / sigma**2 == pytest.approx(1.0 / (1.0 - scale / 2.0), rel=0.03)
