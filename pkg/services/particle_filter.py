"""Fully-adapted auxiliary particle filter with a guided diffusion proposal.

One assimilation step:

    mu_i      = E[x^{k+1} | x^k_i]                   denoiser at t = 1
    w_i       ~ p(y^{k+1} | mu_i)^alpha               alpha tuned to an ESS band
    a_i       ~ Cat(w)                                ancestors
    x^{k+1}_i ~ p(x^{k+1} | x^k_{a_i}, y^{k+1})       guided reverse SDE

Resampling happens every step, so the returned ensembles carry uniform weights.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import softmax
from scipy.stats import norm
from tqdm import tqdm

from services.denoiser import DenoiserInterface
from services.dynamics import ObservationModel
from services.guidance import GuidanceConfig, LikelihoodGuidance, guided_score
from services.sampler import SamplerConfig, reverse_sde_solve
from services.schedule import NoiseSchedule
from utils.errors import ConfigError, DegenerateWeightsError, DomainError, InflationAdaptationError, \
    NonFiniteStateError, ShapeMismatchError
from utils.logging import get_logger
from utils.rng import STAGE_BASELINE, STAGE_FORECAST, STAGE_PPC, STAGE_PREDICT, STAGE_PROPAGATE, STAGE_RESAMPLE, \
    RandomSource, particle_streams, standard_normal, stream

logger = get_logger(__name__)

MULTINOMIAL = "multinomial"
SYSTEMATIC = "systematic"

CLAMP_UPPER = "upper"
CLAMP_LOWER = "lower"
CLAMP_BRACKET = "bracket"


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    weights: np.ndarray
    step: int = 0

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.particles.shape[0]
        if n < 2:
            raise DomainError(f"An ensemble needs at least 2 particles, got {n}")
        if self.weights.shape != (n,):
            raise ShapeMismatchError(f"{self.weights.shape[0]} weights for {n} particles")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DegenerateWeightsError("Ensemble weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, particles: np.ndarray, step: int = 0) -> "ParticleEnsemble":
        n = np.shape(particles)[0]
        return cls(particles, np.full(n, 1.0 / n), step)

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.particles


@dataclass(frozen=True)
class FilterConfig:
    n_particles: int = 256
    n_thr_min: float = 60
    n_thr_max: float = 70
    alpha_min: float = 1e-4
    max_adapt_iters: int = 60
    resampling: str = MULTINOMIAL
    mean_draws: int = 1
    snapshot_every: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ConfigError("filter.particles must be >= 2", key="filter.particles")
        if not 1 < self.n_thr_min < self.n_thr_max <= self.n_particles:
            raise ConfigError(
                f"Need 1 < n_thr_min < n_thr_max <= N, got {self.n_thr_min}, {self.n_thr_max}, "
                f"{self.n_particles}", key="filter.n_thr_min")
        if not 0 < self.alpha_min <= 1:
            raise ConfigError("filter.alpha_min must lie in (0, 1]", key="filter.alpha_min")
        if self.max_adapt_iters < 1:
            raise ConfigError("filter.max_adapt_iters must be >= 1", key="filter.max_adapt_iters")
        if self.resampling not in (MULTINOMIAL, SYSTEMATIC):
            raise ConfigError(f"Unknown resampling '{self.resampling}'", key="filter.resampling")
        if self.mean_draws < 1:
            raise ConfigError("filter.mean_draws must be >= 1", key="filter.mean_draws")
        if self.snapshot_every < 0:
            raise ConfigError("filter.snapshot_every must be >= 0", key="filter.snapshot_every")

    @classmethod
    def from_config(cls, section: dict, seed: int = 0) -> "FilterConfig":
        return cls(
            n_particles=section["particles"],
            n_thr_min=section["n_thr_min"],
            n_thr_max=section["n_thr_max"],
            alpha_min=section["alpha_min"],
            max_adapt_iters=section["max_adapt_iters"],
            resampling=section["resampling"],
            mean_draws=section["mean_draws"],
            snapshot_every=section["snapshot_every"],
            seed=seed,
        )


class InflationResult(NamedTuple):
    alpha: float
    weights: np.ndarray
    n_eff: float
    clamp: Optional[str]
    iterations: int


@dataclass
class StepRecord:
    step: int
    weights: np.ndarray
    ess: float
    alpha: float
    clamp: Optional[str]
    adapt_iterations: int
    ancestors: np.ndarray
    predicted_means: np.ndarray
    ensemble: ParticleEnsemble
    krylov_max_residual: float = 0.0
    krylov_max_iterations: int = 0
    krylov_breakdowns: int = 0


@dataclass
class FilterTrace:
    initial: ParticleEnsemble
    records: List[StepRecord] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def ensembles(self) -> List[ParticleEnsemble]:
        """Ensembles at steps 0..K"""
        return [self.initial] + [r.ensemble for r in self.records]

    @property
    def ess(self) -> np.ndarray:
        return np.array([r.ess for r in self.records])

    @property
    def alpha(self) -> np.ndarray:
        return np.array([r.alpha for r in self.records])

    def particles(self) -> np.ndarray:
        """(K+1, N, d) array of all ensembles"""
        return np.stack([e.particles for e in self.ensembles])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            'step': r.step,
            'ess': r.ess,
            'alpha': r.alpha,
            'clamp': r.clamp or '',
            'adapt_iterations': r.adapt_iterations,
            'krylov_max_residual': r.krylov_max_residual,
            'krylov_max_iterations': r.krylov_max_iterations,
            'krylov_breakdowns': r.krylov_breakdowns,
        } for r in self.records], columns=['step', 'ess', 'alpha', 'clamp', 'adapt_iterations',
                                           'krylov_max_residual', 'krylov_max_iterations',
                                           'krylov_breakdowns'])


def predict_mean(den: DenoiserInterface, x_prev: np.ndarray, schedule: NoiseSchedule,
                 rng: RandomSource, n_draws: int = 1) -> np.ndarray:
    """E[x^{k+1} | x^k] ~ d(sigma_1 eps, x^k, 1), averaged over n_draws noise draws"""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    total = np.zeros_like(x_prev)
    for _ in range(n_draws):
        noise = schedule.sigma_1 * standard_normal(rng, x_prev.shape)
        total += den.evaluate(noise, x_prev, 1.0)
    return total / n_draws


def log_obs_density(obs: ObservationModel, y: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """log N(y | H mu, Sigma_y), one value per row of mu"""
    mu = np.asarray(mu, dtype=np.float64)
    if mu.shape[-1] != obs.dim or np.shape(y)[-1] != obs.m:
        raise ShapeMismatchError(f"Expected states of dim {obs.dim} and observations of dim {obs.m}")
    return norm.logpdf(y, loc=obs.apply(mu), scale=obs.noise_std).sum(axis=-1)


def ess(weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w^2) of the normalized weights"""
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if not np.isfinite(total) or total <= 0 or np.any(weights < 0):
        raise DegenerateWeightsError(f"Weights cannot be normalized (sum={total})")
    normalized = weights / total
    return float(1.0 / np.sum(normalized**2))


def adapt_inflation(logliks: np.ndarray, cfg: FilterConfig) -> InflationResult:
    """Bisection on log(alpha) until the ESS of softmax(alpha * logliks) enters the band"""
    logliks = np.asarray(logliks, dtype=np.float64)
    if not np.all(np.isfinite(logliks)):
        raise DomainError("Log-likelihoods must be finite")

    def evaluate(alpha):
        weights = softmax(alpha * logliks)
        return weights, ess(weights)

    def in_band(n_eff):
        return cfg.n_thr_min <= n_eff <= cfg.n_thr_max

    weights, n_eff = evaluate(1.0)
    if in_band(n_eff):
        return InflationResult(1.0, weights, n_eff, None, 0)
    if n_eff > cfg.n_thr_max:
        return InflationResult(1.0, weights, n_eff, CLAMP_UPPER, 0)

    weights, n_eff = evaluate(cfg.alpha_min)
    if in_band(n_eff):
        return InflationResult(cfg.alpha_min, weights, n_eff, None, 0)
    if n_eff < cfg.n_thr_min:
        return InflationResult(cfg.alpha_min, weights, n_eff, CLAMP_LOWER, 0)

    # ESS is too high at lo and too low at hi
    lo, hi = np.log(cfg.alpha_min), 0.0
    for iteration in range(1, cfg.max_adapt_iters + 1):
        mid = 0.5 * (lo + hi)
        alpha = float(np.exp(mid))
        weights, n_eff = evaluate(alpha)
        if in_band(n_eff):
            return InflationResult(alpha, weights, n_eff, None, iteration)
        if n_eff > cfg.n_thr_max:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-12:
            return InflationResult(alpha, weights, n_eff, CLAMP_BRACKET, iteration)

    raise InflationAdaptationError(
        f"ESS band [{cfg.n_thr_min}, {cfg.n_thr_max}] not reached in {cfg.max_adapt_iters} "
        f"iterations (last alpha={alpha:.3g}, ess={n_eff:.2f})")


def resample(weights: np.ndarray, n: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Ancestor indices drawn from the normalized weights"""
    weights = np.asarray(weights, dtype=np.float64)
    weights = weights / weights.sum()
    if kind == MULTINOMIAL:
        return rng.choice(weights.size, size=n, replace=True, p=weights)
    if kind == SYSTEMATIC:
        positions = (rng.uniform() + np.arange(n)) / n
        cdf = np.cumsum(weights)
        cdf[-1] = 1.0
        return np.minimum(np.searchsorted(cdf, positions, side='right'), weights.size - 1)
    raise ConfigError(f"Unknown resampling '{kind}'", key="filter.resampling")


class _ChunkResult(NamedTuple):
    states: np.ndarray
    guidance: Optional[LikelihoodGuidance]


def _propagate(den: DenoiserInterface, obs: Optional[ObservationModel], y: Optional[np.ndarray],
               x_prev: np.ndarray, sampler_cfg: SamplerConfig, guidance_cfg: GuidanceConfig,
               rngs: Sequence[np.random.Generator], workers: int, step: int):
    """Run one (guided) reverse solve per row of x_prev, split across worker threads"""
    chunks = [c for c in np.array_split(np.arange(x_prev.shape[0]), max(1, workers)) if c.size]

    def run(indices):
        source = guided_score(den, obs, y, den.schedule, guidance_cfg)
        try:
            states = reverse_sde_solve(source, x_prev[indices], sampler_cfg, den.schedule,
                                       [rngs[i] for i in indices])
        except NonFiniteStateError as e:
            particle = None if e.particle is None else int(indices[e.particle])
            raise NonFiniteStateError(
                f"Non-finite particle {particle} at assimilation step {step} (sampler step {e.step}, "
                f"t={e.t:.6g})", step=step, t=e.t, particle=particle) from e
        return _ChunkResult(states, source.guidance)

    if len(chunks) == 1:
        results = [run(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            results = list(pool.map(run, chunks))

    states = np.concatenate([r.states for r in results])
    guidance = [r.guidance for r in results if r.guidance is not None]
    return states, guidance


def faapf_run(den: DenoiserInterface, obs: ObservationModel, sampler_cfg: SamplerConfig,
              guidance_cfg: GuidanceConfig, filter_cfg: FilterConfig, x0: np.ndarray,
              observations: np.ndarray, workers: int = 1, progress: bool = False,
              on_step: Optional[Callable[[StepRecord], None]] = None) -> FilterTrace:
    """Assimilate y^{1:K} starting from all particles at x0"""
    schedule = den.schedule
    x0 = np.asarray(x0, dtype=np.float64)
    observations = np.asarray(observations, dtype=np.float64).reshape(-1, obs.m)
    if x0.shape != (obs.dim,):
        raise ShapeMismatchError(f"x0 has shape {x0.shape}, observation model expects ({obs.dim},)")

    n = filter_cfg.n_particles
    seed = filter_cfg.seed
    trace = FilterTrace(initial=ParticleEnsemble.uniform(np.tile(x0, (n, 1)), step=0))
    particles = trace.initial.particles

    logger.info(f"FA-APF: N={n}, K={observations.shape[0]}, band=[{filter_cfg.n_thr_min}, "
                f"{filter_cfg.n_thr_max}], resampling={filter_cfg.resampling}, workers={workers}")

    steps = tqdm(range(1, observations.shape[0] + 1), desc="assimilate", disable=not progress)
    for k in steps:
        y = observations[k - 1]
        means = predict_mean(den, particles, schedule, particle_streams(seed, k, STAGE_PREDICT, n),
                             filter_cfg.mean_draws)
        adapted = adapt_inflation(log_obs_density(obs, y, means), filter_cfg)
        ancestors = resample(adapted.weights, n, filter_cfg.resampling, stream(seed, k, STAGE_RESAMPLE))

        particles, guidance = _propagate(den, obs, y, particles[ancestors], sampler_cfg, guidance_cfg,
                                         particle_streams(seed, k, STAGE_PROPAGATE, n), workers, k)

        record = StepRecord(
            step=k,
            weights=adapted.weights,
            ess=adapted.n_eff,
            alpha=adapted.alpha,
            clamp=adapted.clamp,
            adapt_iterations=adapted.iterations,
            ancestors=ancestors,
            predicted_means=means,
            ensemble=ParticleEnsemble.uniform(particles, step=k),
            krylov_max_residual=max((g.max_residual for g in guidance), default=0.0),
            krylov_max_iterations=max((g.max_iterations for g in guidance), default=0),
            krylov_breakdowns=sum(g.breakdowns for g in guidance),
        )
        trace.records.append(record)
        if record.clamp:
            logger.info(f"step {k}: inflation clamped ({record.clamp}) at alpha={record.alpha:.4g}, "
                        f"ess={record.ess:.1f}")
        logger.debug(f"step {k}: alpha={record.alpha:.4g} ess={record.ess:.1f} "
                     f"iters={record.adapt_iterations} krylov_res={record.krylov_max_residual:.3g}")
        steps.set_postfix(ess=f"{record.ess:.1f}", alpha=f"{record.alpha:.3g}")
        if on_step is not None:
            on_step(record)

    return trace


def unconditional_ensemble_run(den: DenoiserInterface, sampler_cfg: SamplerConfig, n: int,
                               x0: np.ndarray, K: int, seed: int = 0, workers: int = 1,
                               progress: bool = False) -> np.ndarray:
    """(K+1, n, d) autoregressive rollouts with the unguided sampler"""
    if n < 1 or K < 0:
        raise DomainError(f"Need n >= 1 members and K >= 0 steps, got n={n}, K={K}")
    x0 = np.asarray(x0, dtype=np.float64)
    members = np.tile(x0, (n, 1))
    trajectory = [members]
    for k in tqdm(range(1, K + 1), desc="baseline", disable=not progress):
        members, _ = _propagate(den, None, None, members, sampler_cfg, GuidanceConfig(),
                                particle_streams(seed, k, STAGE_BASELINE, n), workers, k)
        trajectory.append(members)
    return np.stack(trajectory)


def conditional_samples(den: DenoiserInterface, obs: ObservationModel, y: np.ndarray, x_prev: np.ndarray,
                        sampler_cfg: SamplerConfig, guidance_cfg: GuidanceConfig, n: int,
                        seed: int = 0, step: int = 0, workers: int = 1) -> np.ndarray:
    """n draws from the guided proposal p(x^{k+1} | x_prev, y) for one particle"""
    x_prev = np.tile(np.asarray(x_prev, dtype=np.float64), (n, 1))
    samples, _ = _propagate(den, obs, y, x_prev, sampler_cfg, guidance_cfg,
                            particle_streams(seed, step, STAGE_PPC, n), workers, step)
    return samples


def forecast_samples(den: DenoiserInterface, particles: np.ndarray, sampler_cfg: SamplerConfig,
                     seed: int = 0, step: int = 0, workers: int = 1) -> np.ndarray:
    """One unguided draw from p(x^{k+1} | x^k_i) per particle, the one-step forecast ensemble"""
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    samples, _ = _propagate(den, None, None, particles, sampler_cfg, GuidanceConfig(),
                            particle_streams(seed, step, STAGE_FORECAST, particles.shape[0]), workers, step)
    return samples
