import numpy as np
import pytest

from services.schedule import NoiseSchedule, coefficients, time_grid
from utils.errors import ConfigError, DomainError


def _finite_difference(fn, t, h=1e-6):
    return (fn(t + h) - fn(t - h)) / (2 * h)


def test_ve_endpoints(schedule):
    alpha, sigma, f, g = coefficients(schedule, 0.0)
    assert alpha == 1.0
    assert sigma == pytest.approx(0.02, rel=1e-12)
    assert f == 0.0
    assert g > 0

    alpha, sigma, f, _ = coefficients(schedule, 1.0)
    assert alpha == 1.0
    assert sigma == pytest.approx(100.0, rel=1e-12)
    assert f == 0.0


def test_scalar_time_returns_floats(schedule):
    result = coefficients(schedule, 0.3)
    assert all(isinstance(v, float) for v in result)


def test_array_time_vectorizes(schedule):
    ts = np.linspace(0.0, 1.0, 5)
    alpha, sigma, f, g = coefficients(schedule, ts)
    assert alpha.shape == sigma.shape == f.shape == g.shape == (5,)


@pytest.mark.parametrize("kind", ["variance-exploding", "variance-preserving"])
@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_consistency_relation(kind, t):
    sched = NoiseSchedule(kind=kind, sigma_min=0.02)
    _, sigma, f, g = sched.coefficients(t)

    dlog_alpha = _finite_difference(lambda s: np.log(sched.alpha(s)), t)
    dsigma_sq = _finite_difference(lambda s: sched.sigma(s) ** 2, t)
    assert f == pytest.approx(dlog_alpha, abs=1e-5)
    assert g**2 == pytest.approx(dsigma_sq - 2 * f * sigma**2, rel=1e-5)


def test_ve_diffusion_matches_finite_difference_at_half(schedule):
    _, _, _, g = schedule.coefficients(0.5)
    fd = _finite_difference(lambda s: schedule.sigma(s) ** 2, 0.5)
    assert g**2 == pytest.approx(fd, rel=1e-6)


def test_sigma_strictly_increasing(schedule, vp_schedule):
    ts = np.linspace(0.0, 1.0, 101)
    for sched in (schedule, vp_schedule):
        assert np.all(np.diff(sched.sigma(ts)) > 0)


def test_vp_alpha_decreasing_and_snr_increasing(vp_schedule):
    ts = np.linspace(0.0, 1.0, 101)
    alpha = vp_schedule.alpha(ts)
    assert alpha[0] == pytest.approx(1.0)
    assert np.all(np.diff(alpha) < 0)
    assert np.all(np.diff(vp_schedule.sigma(ts) ** 2 / alpha**2) > 0)


@pytest.mark.parametrize("t", [-0.01, 1.01, float("nan")])
def test_time_outside_unit_interval_rejected(schedule, t):
    with pytest.raises(DomainError):
        coefficients(schedule, t)


@pytest.mark.parametrize("kind", ["variance-exploding", "variance-preserving"])
def test_time_from_sigma_inverts_sigma(kind):
    sched = NoiseSchedule(kind=kind, sigma_min=0.02)
    ts = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(sched.time_from_sigma(sched.sigma(ts)), ts, atol=1e-9)


def test_linear_grid_endpoints_only():
    sched = NoiseSchedule(warping="linear")
    np.testing.assert_array_equal(time_grid(2, sched), [1.0, 0.0])


@pytest.mark.parametrize("warping", ["log-sigma", "polynomial", "linear"])
def test_grid_monotone_and_endpoint_exact(warping):
    grid = time_grid(40, NoiseSchedule(warping=warping))
    assert grid.shape == (40,)
    assert grid[0] == 1.0 and grid[-1] == 0.0
    assert grid.max() == 1.0 and grid.min() == 0.0
    assert np.all(np.diff(grid) < 0)


def test_log_sigma_grid_is_geometric_in_sigma(schedule):
    sigmas = schedule.sigma(time_grid(11, schedule))
    ratios = sigmas[1:] / sigmas[:-1]
    np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)


def test_grid_needs_two_points(schedule):
    with pytest.raises(DomainError):
        time_grid(1, schedule)


def test_invalid_schedule_rejected():
    with pytest.raises(ConfigError):
        NoiseSchedule(kind="cosine")
    with pytest.raises(ConfigError):
        NoiseSchedule(sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(ConfigError):
        NoiseSchedule(warping="quadratic")


def test_schedule_hash_tracks_fields(schedule):
    assert schedule.schedule_hash() == NoiseSchedule().schedule_hash()
    assert schedule.schedule_hash() != NoiseSchedule(sigma_max=80.0).schedule_hash()
