"""Diffusion noise schedules.

A schedule maps diffusion time t in [0, 1] to the perturbation kernel
x_t = alpha_t x + sigma_t z and to the drift/diffusion pair (f_t, g_t) of the
forward SDE, related by

    f_t   = d log(alpha_t) / dt
    g_t^2 = d(sigma_t^2) / dt - 2 f_t sigma_t^2

Variance exploding: alpha_t = 1, sigma_t = sigma_min (sigma_max / sigma_min)^t.

Variance preserving: log alpha_t = -(beta_min t + (beta_max - beta_min) t^2 / 2) / 2
and sigma_t^2 = 1 - alpha_t^2 (1 - sigma_min^2), so that f_t = -beta(t) / 2 and
g_t^2 = beta(t). sigma_max is not used by this kind.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Any, Dict, NamedTuple, Union

import numpy as np

from utils.errors import ConfigError, DomainError
from utils.logging import get_logger

logger = get_logger(__name__)

VARIANCE_EXPLODING = "variance-exploding"
VARIANCE_PRESERVING = "variance-preserving"
WARPINGS = ("log-sigma", "polynomial", "linear")

ArrayLike = Union[float, np.ndarray]


class ScheduleCoefficients(NamedTuple):
    alpha: ArrayLike
    sigma: ArrayLike
    drift_f: ArrayLike
    diff_g: ArrayLike


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = VARIANCE_EXPLODING
    sigma_min: float = 0.02
    sigma_max: float = 100.0
    beta_min: float = 0.1
    beta_max: float = 20.0
    warping: str = "log-sigma"
    rho: float = 7.0

    def __post_init__(self):
        if self.kind not in (VARIANCE_EXPLODING, VARIANCE_PRESERVING):
            raise ConfigError(f"Unknown schedule kind '{self.kind}'", key="schedule.kind")
        if self.warping not in WARPINGS:
            raise ConfigError(f"Unknown grid warping '{self.warping}'", key="schedule.warping")
        if not self.sigma_min > 0:
            raise ConfigError("schedule.sigma_min must be positive", key="schedule.sigma_min")
        if self.kind == VARIANCE_EXPLODING and not self.sigma_max > self.sigma_min:
            raise ConfigError("schedule.sigma_max must exceed sigma_min", key="schedule.sigma_max")
        if self.kind == VARIANCE_PRESERVING:
            if not self.sigma_min < 1:
                raise ConfigError("schedule.sigma_min must be below 1 for a VP schedule",
                                  key="schedule.sigma_min")
            if not (0 < self.beta_min <= self.beta_max):
                raise ConfigError("schedule needs 0 < beta_min <= beta_max", key="schedule.beta_min")
        if not self.rho > 0:
            raise ConfigError("schedule.rho must be positive", key="schedule.rho")

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "NoiseSchedule":
        return cls(
            kind=section["kind"],
            sigma_min=section["sigma_min"],
            sigma_max=section["sigma_max"],
            beta_min=section["beta_min"],
            beta_max=section["beta_max"],
            warping=section["warping"],
            rho=section["rho"],
        )

    @property
    def exploding(self) -> bool:
        return self.kind == VARIANCE_EXPLODING

    @property
    def sigma_1(self) -> float:
        return float(self.sigma(1.0))

    def beta(self, t: ArrayLike) -> ArrayLike:
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def alpha(self, t: ArrayLike) -> ArrayLike:
        if self.exploding:
            return np.ones_like(np.asarray(t, dtype=np.float64))
        return np.exp(-0.5 * (self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2))

    def sigma(self, t: ArrayLike) -> ArrayLike:
        if self.exploding:
            return self.sigma_min * (self.sigma_max / self.sigma_min) ** np.asarray(t, dtype=np.float64)
        return np.sqrt(1.0 - self.alpha(t) ** 2 * (1.0 - self.sigma_min**2))

    def coefficients(self, t: ArrayLike) -> ScheduleCoefficients:
        """(alpha_t, sigma_t, f_t, g_t) in closed form"""
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
            raise DomainError(f"Diffusion time must lie in [0, 1], got {t}")

        alpha = self.alpha(t_arr)
        sigma = self.sigma(t_arr)
        if self.exploding:
            drift_f = np.zeros_like(t_arr)
            diff_g = sigma * np.sqrt(2.0 * np.log(self.sigma_max / self.sigma_min))
        else:
            drift_f = -0.5 * self.beta(t_arr)
            diff_g = np.sqrt(self.beta(t_arr))

        if t_arr.ndim == 0:
            return ScheduleCoefficients(float(alpha), float(sigma), float(drift_f), float(diff_g))
        return ScheduleCoefficients(alpha, sigma, drift_f, diff_g)

    def time_from_sigma(self, sigma: ArrayLike) -> ArrayLike:
        """Inverse of t -> sigma_t on [0, 1]"""
        sigma = np.asarray(sigma, dtype=np.float64)
        if self.exploding:
            t = np.log(sigma / self.sigma_min) / np.log(self.sigma_max / self.sigma_min)
        else:
            alpha_sq = (1.0 - sigma**2) / (1.0 - self.sigma_min**2)
            integral = -np.log(alpha_sq)
            delta = self.beta_max - self.beta_min
            if delta > 0:
                t = (-self.beta_min + np.sqrt(self.beta_min**2 + 2.0 * delta * integral)) / delta
            else:
                t = integral / self.beta_min
        return np.clip(t, 0.0, 1.0)

    def schedule_hash(self) -> str:
        """Stable digest identifying the schedule, stored in checkpoints"""
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def coefficients(schedule: NoiseSchedule, t: ArrayLike) -> ScheduleCoefficients:
    """Coefficient quadruple (alpha, sigma, f, g) at diffusion time t"""
    return schedule.coefficients(t)


def time_grid(n_steps: int, schedule: NoiseSchedule) -> np.ndarray:
    """Strictly decreasing diffusion times from 1 to 0"""
    if n_steps < 2:
        raise DomainError(f"A time grid needs at least 2 points, got {n_steps}")

    if schedule.warping == "linear":
        grid = np.linspace(1.0, 0.0, n_steps)
    else:
        sigma_hi = schedule.sigma(1.0)
        sigma_lo = schedule.sigma(0.0)
        if schedule.warping == "log-sigma":
            sigmas = np.exp(np.linspace(np.log(sigma_hi), np.log(sigma_lo), n_steps))
        else:
            ramp = np.linspace(0.0, 1.0, n_steps)
            inv_rho = 1.0 / schedule.rho
            sigmas = (sigma_hi**inv_rho + ramp * (sigma_lo**inv_rho - sigma_hi**inv_rho)) ** schedule.rho
        grid = schedule.time_from_sigma(sigmas)
        grid[0], grid[-1] = 1.0, 0.0

    if not np.all(np.diff(grid) < 0):
        raise DomainError(f"{schedule.warping} warping with {n_steps} steps is not strictly monotone")
    return grid
