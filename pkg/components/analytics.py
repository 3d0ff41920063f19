"""Evaluation metrics for assimilation runs.

Per-step tables are pandas frames with columns
step, group, skill, spread, ess, alpha, clamp where group is one of
``observed``, ``unobserved`` or ``all``.
"""

from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from services.dynamics import ObservationModel
from utils.errors import DomainError

METRIC_COLUMNS = ['step', 'group', 'skill', 'spread', 'ess', 'alpha', 'clamp']
GROUPS = ('observed', 'unobserved', 'all')
PPC_MIN_SAMPLES = 32


class PredictiveCheck(NamedTuple):
    grid: np.ndarray
    density: np.ndarray
    rank: float
    observed: float
    mean: float
    std: float


class KsResult(NamedTuple):
    statistic: float
    pvalue: float
    critical_value: float

    @property
    def passed(self) -> bool:
        return self.statistic < self.critical_value


def _subset(d: int, coords: Optional[Sequence[int]]) -> np.ndarray:
    if coords is None:
        return np.arange(d)
    coords = np.asarray(coords, dtype=int)
    if coords.size == 0:
        raise DomainError("Coordinate subset must be nonempty")
    return coords


def skill(ensemble: np.ndarray, truth: np.ndarray, coords: Optional[Sequence[int]] = None) -> float:
    """RMSE of the ensemble mean against the truth over a coordinate subset"""
    ensemble = np.atleast_2d(ensemble)
    idx = _subset(ensemble.shape[1], coords)
    error = ensemble.mean(axis=0)[idx] - np.asarray(truth)[idx]
    return float(np.sqrt(np.mean(error**2)))


def spread(ensemble: np.ndarray, coords: Optional[Sequence[int]] = None) -> float:
    """Root mean over the subset of the unbiased per-coordinate ensemble variance"""
    ensemble = np.atleast_2d(ensemble)
    if ensemble.shape[0] < 2:
        raise DomainError(f"Spread needs at least 2 members, got {ensemble.shape[0]}")
    idx = _subset(ensemble.shape[1], coords)
    return float(np.sqrt(np.mean(ensemble[:, idx].var(axis=0, ddof=1))))


def posterior_predictive_check(samples: np.ndarray, obs: ObservationModel, y: np.ndarray,
                               coordinate: int, grid_points: int = 401) -> PredictiveCheck:
    """Equal-weight mixture of N(H x_j, Sigma_y) at one observed coordinate, and the rank of y"""
    samples = np.atleast_2d(samples)
    if samples.shape[0] < PPC_MIN_SAMPLES:
        raise DomainError(f"Posterior predictive check needs >= {PPC_MIN_SAMPLES} samples, "
                          f"got {samples.shape[0]}")
    if not 0 <= coordinate < obs.m:
        raise DomainError(f"Observation coordinate {coordinate} outside [0, {obs.m})")

    centers = obs.apply(samples)[:, coordinate]
    noise = float(obs.noise_std[coordinate])
    observed = float(np.asarray(y)[coordinate])

    mean = float(centers.mean())
    std = float(np.sqrt(centers.var() + noise**2))
    grid = np.linspace(mean - 5 * std, mean + 5 * std, grid_points)
    density = stats.norm.pdf(grid[:, None], loc=centers[None, :], scale=noise).mean(axis=1)
    rank = float(stats.norm.cdf(observed, loc=centers, scale=noise).mean())
    return PredictiveCheck(grid=grid, density=density, rank=rank, observed=observed, mean=mean, std=std)


def predictive_frame(check: PredictiveCheck) -> pd.DataFrame:
    frame = pd.DataFrame({'value': check.grid, 'density': check.density})
    frame['observed'] = check.observed
    frame['rank'] = check.rank
    return frame


def weak_convergence_error(particles: np.ndarray, weights: np.ndarray,
                           g: Callable[[np.ndarray], np.ndarray], oracle: float) -> float:
    """|sum_i w_i g(x_i) - E[g]|"""
    weights = np.asarray(weights, dtype=np.float64)
    return float(abs(weights @ g(np.atleast_2d(particles)) - oracle))


def ks_uniformity(ranks: Sequence[float], level: float = 0.05) -> KsResult:
    """Kolmogorov-Smirnov test of the ranks against U(0, 1)"""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DomainError("No ranks to test")
    result = stats.kstest(ranks, 'uniform')
    critical = float(stats.kstwo.ppf(1.0 - level, ranks.size))
    return KsResult(float(result.statistic), float(result.pvalue), critical)


def spread_skill_ratio(spreads: Sequence[float], skills: Sequence[float]) -> float:
    """Mean spread over mean skill"""
    mean_skill = float(np.mean(skills))
    if mean_skill == 0:
        return float('nan')
    return float(np.mean(spreads)) / mean_skill


def metrics_table(ensembles: np.ndarray, truth: np.ndarray, observed: Sequence[int],
                  ess: Optional[Sequence[float]] = None, alpha: Optional[Sequence[float]] = None,
                  clamp: Optional[Sequence[Optional[str]]] = None) -> pd.DataFrame:
    """Per-step skill and spread per coordinate group for steps 1..K

    ``ensembles`` and ``truth`` cover steps 0..K; ``ess``, ``alpha`` and ``clamp``
    cover steps 1..K.
    """
    ensembles = np.asarray(ensembles)
    truth = np.asarray(truth)
    if ensembles.shape[0] != truth.shape[0]:
        raise DomainError(f"{ensembles.shape[0]} ensembles for {truth.shape[0]} truth states")

    d = truth.shape[1]
    observed = np.asarray(observed, dtype=int)
    groups = {'observed': observed, 'unobserved': np.setdiff1d(np.arange(d), observed),
              'all': np.arange(d)}

    rows: List[dict] = []
    for k in range(1, truth.shape[0]):
        for name in GROUPS:
            coords = groups[name]
            if coords.size == 0:
                continue
            rows.append({
                'step': k,
                'group': name,
                'skill': skill(ensembles[k], truth[k], coords),
                'spread': spread(ensembles[k], coords) if ensembles.shape[1] > 1 else np.nan,
                'ess': np.nan if ess is None else float(ess[k - 1]),
                'alpha': np.nan if alpha is None else float(alpha[k - 1]),
                'clamp': '' if clamp is None else (clamp[k - 1] or ''),
            })
    return pd.DataFrame(rows, columns=METRIC_COLUMNS)


def summarize_metrics(frame: pd.DataFrame, spin_up: int = 0) -> pd.DataFrame:
    """Mean skill and spread per group after the first spin_up steps"""
    settled = frame[frame['step'] > spin_up]
    summary = settled.groupby('group', sort=False).agg(skill=('skill', 'mean'), spread=('spread', 'mean'),
                                                       steps=('step', 'count'))
    summary['spread_skill'] = summary['spread'] / summary['skill']
    return summary.reset_index()


def kalman_deviation(ensembles: np.ndarray, kalman_means: np.ndarray,
                     kalman_stds: np.ndarray) -> np.ndarray:
    """Per-step RMS of (ensemble mean - Kalman mean) / Kalman std for steps 1..K"""
    means = np.asarray(ensembles).mean(axis=1)[1:]
    scaled = (means - np.asarray(kalman_means)[1:]) / np.asarray(kalman_stds)[1:]
    return np.sqrt(np.mean(scaled**2, axis=1))
