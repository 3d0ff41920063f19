"""Moment-matching likelihood guidance.

The likelihood score of y given a noisy state is approximated through the
Gaussian q(x | x_t, x_prev) = N(x_hat, V) with x_hat the denoiser output and
V = (sigma_t^2 / alpha_t) dx_hat/dx_t, never formed explicitly:

    u     = (Sigma_y + H V H^T)^-1 (y - H x_hat)     (Krylov, matrix-free)
    score = (dx_hat/dx_t)^T H^T u                    (one vjp)

The derivative of V with respect to x_t is neglected.
"""

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np

from services.denoiser import DenoiserInterface, score_from_denoiser
from services.dynamics import ObservationModel
from services.sampler import ScoreSource
from services.schedule import NoiseSchedule
from utils.errors import ConfigError
from utils.logging import get_logger

logger = get_logger(__name__)

BICGSTAB = "bicgstab"
CONJUGATE_GRADIENT = "conjugate-gradient"
SOLVER_ALIASES = {"cg": CONJUGATE_GRADIENT}
VARIANCE_MODELS = ("tweedie-vjp", "scalar-fallback")

LinearOperator = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GuidanceConfig:
    solver: str = BICGSTAB
    max_iters: int = 2
    tol: float = 1e-8
    variance_model: str = "tweedie-vjp"

    def __post_init__(self):
        object.__setattr__(self, "solver", SOLVER_ALIASES.get(self.solver, self.solver))
        if self.solver not in (BICGSTAB, CONJUGATE_GRADIENT):
            raise ConfigError(f"Unknown Krylov solver '{self.solver}'", key="guidance.solver")
        if self.max_iters < 1:
            raise ConfigError("guidance.max_iters must be >= 1", key="guidance.max_iters")
        if self.tol < 0:
            raise ConfigError("guidance.tol must be >= 0", key="guidance.tol")
        if self.variance_model not in VARIANCE_MODELS:
            raise ConfigError(f"Unknown variance model '{self.variance_model}'",
                              key="guidance.variance_model")

    @classmethod
    def from_config(cls, section: dict) -> "GuidanceConfig":
        return cls(
            solver=section["solver"],
            max_iters=section["max_iters"],
            tol=section["tol"],
            variance_model=section["variance_model"],
        )


class KrylovResult(NamedTuple):
    solution: np.ndarray
    residual_norm: np.ndarray
    iterations: np.ndarray
    breakdown: np.ndarray


class LikelihoodScoreResult(NamedTuple):
    score: np.ndarray
    residual_norm: np.ndarray
    iters_used: np.ndarray
    breakdown: np.ndarray


def _rowdot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", a, b)


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den != 0, num / np.where(den != 0, den, 1.0), 0.0)


def _usable(den: np.ndarray) -> np.ndarray:
    return np.isfinite(den) & (den != 0)


def _as_rows(apply: LinearOperator, b: np.ndarray):
    """View b as (rows, m) and wrap apply to work on that view"""
    b = np.asarray(b, dtype=np.float64)
    shape = b.shape

    def rows_apply(z):
        return np.asarray(apply(z.reshape(shape))).reshape(z.shape)

    def restore(x, res, iterations, breakdown):
        batch = shape[:-1]
        return KrylovResult(solution=x.reshape(shape), residual_norm=res.reshape(batch),
                            iterations=iterations.reshape(batch), breakdown=breakdown.reshape(batch))

    return b.reshape(-1, shape[-1]), rows_apply, restore


def bicgstab(apply: LinearOperator, b: np.ndarray, max_iters: int, tol: float) -> KrylovResult:
    """Row-batched BiCGStab from a zero initial guess"""
    b, apply, restore = _as_rows(apply, b)
    x = np.zeros_like(b)
    r0 = b.copy()
    r = b.copy()
    p = np.zeros_like(b)
    v = np.zeros_like(b)

    threshold = tol * np.linalg.norm(b, axis=-1)
    res = np.linalg.norm(b, axis=-1)
    active = res > threshold
    breakdown = np.zeros_like(active)
    iterations = np.zeros(res.shape, dtype=int)
    rho = np.ones_like(res)
    alpha = np.ones_like(res)
    omega = np.ones_like(res)
    rho_next = _rowdot(r0, r0)

    for _ in range(max_iters):
        if not np.any(active):
            break
        live = active[..., None]
        beta = _ratio(rho_next, rho) * _ratio(alpha, omega)
        rho = np.where(active, rho_next, rho)
        p = np.where(live, r + beta[..., None] * (p - omega[..., None] * v), p)
        v = np.where(live, apply(p), v)

        denom = _rowdot(r0, v)
        broke = active & ~_usable(denom)
        breakdown |= broke
        active &= ~broke
        iterations += active

        alpha = np.where(active, _ratio(rho, denom), alpha)
        s = r - alpha[..., None] * v
        s_norm = np.linalg.norm(s, axis=-1)
        half = active & (s_norm <= threshold)
        x = np.where(half[..., None], x + alpha[..., None] * p, x)
        res = np.where(half, s_norm, res)
        active &= ~half
        if not np.any(active):
            break

        t = apply(s)
        tt = _rowdot(t, t)
        omega_new = _ratio(_rowdot(t, s), tt)
        broke = active & ~(_usable(tt) & _usable(omega_new))
        # keep the half-step iterate
        x = np.where(broke[..., None], x + alpha[..., None] * p, x)
        res = np.where(broke, s_norm, res)
        breakdown |= broke
        active &= ~broke
        live = active[..., None]

        omega = np.where(active, omega_new, omega)
        x = np.where(live, x + alpha[..., None] * p + omega[..., None] * s, x)
        r = np.where(live, s - omega[..., None] * t, r)
        rho_next = np.where(active, -omega * _rowdot(r0, t), rho_next)
        res = np.where(active, np.linalg.norm(r, axis=-1), res)
        active &= ~(res <= threshold)

    return restore(x, res, iterations, breakdown)


def conjugate_gradient(apply: LinearOperator, b: np.ndarray, max_iters: int, tol: float) -> KrylovResult:
    """Row-batched CG from a zero initial guess; the operator must be SPD"""
    b, apply, restore = _as_rows(apply, b)
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rs = _rowdot(r, r)

    threshold = tol * np.sqrt(rs)
    res = np.sqrt(rs)
    active = res > threshold
    breakdown = np.zeros_like(active)
    iterations = np.zeros(res.shape, dtype=int)

    for _ in range(max_iters):
        if not np.any(active):
            break
        ap = apply(p)
        curvature = _rowdot(p, ap)
        broke = active & ~(np.isfinite(curvature) & (curvature > 0))
        breakdown |= broke
        active &= ~broke
        iterations += active

        live = active[..., None]
        step = _ratio(rs, curvature)
        x = np.where(live, x + step[..., None] * p, x)
        r = np.where(live, r - step[..., None] * ap, r)
        rs_new = _rowdot(r, r)
        res = np.where(active, np.sqrt(rs_new), res)
        p = np.where(live, r + _ratio(rs_new, rs)[..., None] * p, p)
        rs = np.where(active, rs_new, rs)
        active &= ~(res <= threshold)

    return restore(x, res, iterations, breakdown)


def krylov_solve(apply: LinearOperator, b: np.ndarray, cfg: GuidanceConfig) -> KrylovResult:
    """Approximate apply(u) = b for every row of b"""
    solver = bicgstab if cfg.solver == BICGSTAB else conjugate_gradient
    result = solver(apply, b, cfg.max_iters, cfg.tol)
    if np.any(result.breakdown):
        logger.warning(f"{cfg.solver} broke down on {int(np.sum(result.breakdown))} system(s); "
                       f"using the last iterate")
    return result


def matfree_apply(den: DenoiserInterface, obs: ObservationModel, x_t: np.ndarray, x_prev: np.ndarray,
                  t: float, schedule: NoiseSchedule, v: np.ndarray,
                  variance_model: str = "tweedie-vjp") -> np.ndarray:
    """(Sigma_y + H V H^T) v with V applied through the denoiser vjp"""
    alpha, sigma, _, _ = schedule.coefficients(t)
    v = np.asarray(v, dtype=np.float64)
    if variance_model == "scalar-fallback":
        return obs.noise_var * v + (sigma**2 / (alpha**2 + sigma**2)) * obs.apply(obs.adjoint(v))
    back = den.vjp(x_t, x_prev, t, obs.adjoint(v))
    return obs.noise_var * v + (sigma**2 / alpha) * obs.apply(back)


def likelihood_score(den: DenoiserInterface, obs: ObservationModel, y: np.ndarray, x_t: np.ndarray,
                     x_prev: np.ndarray, t: float, schedule: NoiseSchedule, cfg: GuidanceConfig,
                     denoised: Optional[np.ndarray] = None) -> LikelihoodScoreResult:
    """Gaussian-approximate gradient of log p(y | x_t, x_prev) with respect to x_t"""
    if denoised is None:
        denoised = den.evaluate(x_t, x_prev, t)
    residual = np.asarray(y, dtype=np.float64) - obs.apply(denoised)

    def operator(w):
        return matfree_apply(den, obs, x_t, x_prev, t, schedule, w, cfg.variance_model)

    solved = krylov_solve(operator, residual, cfg)
    score = den.vjp(x_t, x_prev, t, obs.adjoint(solved.solution))
    return LikelihoodScoreResult(score=score, residual_norm=solved.residual_norm,
                                 iters_used=solved.iterations, breakdown=solved.breakdown)


def posterior_score(den: DenoiserInterface, obs: ObservationModel, y: Optional[np.ndarray],
                    x_t: np.ndarray, x_prev: np.ndarray, t: float, schedule: NoiseSchedule,
                    cfg: GuidanceConfig) -> np.ndarray:
    """Prior score plus likelihood score; the prior score alone when y is None"""
    denoised = den.evaluate(x_t, x_prev, t)
    prior = score_from_denoiser(den, x_t, x_prev, t, schedule, denoised=denoised)
    if y is None:
        return prior
    return prior + likelihood_score(den, obs, y, x_t, x_prev, t, schedule, cfg, denoised).score


@dataclass(eq=False)
class LikelihoodGuidance:
    """Guidance term for ScoreSource that also tracks Krylov diagnostics"""

    denoiser: DenoiserInterface
    obs: ObservationModel
    y: np.ndarray
    schedule: NoiseSchedule
    cfg: GuidanceConfig
    calls: int = field(default=0, init=False)
    max_residual: float = field(default=0.0, init=False)
    max_iterations: int = field(default=0, init=False)
    breakdowns: int = field(default=0, init=False)

    def __call__(self, x_t: np.ndarray, x_prev: np.ndarray, t: float, denoised: np.ndarray) -> np.ndarray:
        result = likelihood_score(self.denoiser, self.obs, self.y, x_t, x_prev, t, self.schedule,
                                  self.cfg, denoised)
        self.calls += 1
        self.max_residual = max(self.max_residual, float(np.max(result.residual_norm)))
        self.max_iterations = max(self.max_iterations, int(np.max(result.iters_used)))
        self.breakdowns += int(np.sum(result.breakdown))
        return result.score


def guided_score(den: DenoiserInterface, obs: ObservationModel, y: Optional[np.ndarray],
                 schedule: NoiseSchedule, cfg: GuidanceConfig) -> ScoreSource:
    """Score source for sampling p(x^{k+1} | x^k, y^{k+1}); unconditional when y is None"""
    if y is None:
        return ScoreSource(den, schedule)
    return ScoreSource(den, schedule, LikelihoodGuidance(den, obs, np.asarray(y, dtype=np.float64),
                                                         schedule, cfg))
