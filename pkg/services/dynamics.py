"""Ground-truth dynamical systems and the linear observation model.

Arrays carry the state on their last axis; every step and observation
function accepts a leading batch axis.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Union

import numpy as np

from utils.errors import ConfigError, DomainError, ShapeMismatchError, SingularCovarianceError
from utils.logging import get_logger
from utils.rng import stream

logger = get_logger(__name__)

LINEAR_GAUSSIAN = "linear-gaussian"
LORENZ96 = "lorenz96"


@dataclass(eq=False)
class LinearGaussianSSM:
    """x^{k+1} = A x^k + w, w ~ N(0, Q)"""

    A: np.ndarray
    Q: np.ndarray
    x0: np.ndarray
    kind: str = field(default=LINEAR_GAUSSIAN, init=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))

        d = self.x0.shape[0]
        if self.A.shape != (d, d) or self.Q.shape != (d, d):
            raise ShapeMismatchError(
                f"A {self.A.shape} and Q {self.Q.shape} must both be ({d}, {d})")
        if not np.allclose(self.Q, self.Q.T, rtol=0.0, atol=1e-12):
            raise SingularCovarianceError("Q must be symmetric")
        try:
            self.chol_q = np.linalg.cholesky(self.Q)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError("Q must be positive definite")

        self.spectral_radius = float(np.max(np.abs(np.linalg.eigvals(self.A))))
        if self.spectral_radius > 1.0:
            logger.warning(f"Transition matrix has spectral radius {self.spectral_radius:.3f} > 1")

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "LinearGaussianSSM":
        """A = decay I plus a cyclic nearest-neighbour coupling, Q = noise_var I"""
        d = section["dim"]
        A = section["lg_decay"] * np.eye(d) + section["lg_coupling"] * np.roll(np.eye(d), 1, axis=1)
        Q = section["lg_noise_var"] * np.eye(d)
        return cls(A=A, Q=Q, x0=np.full(d, section["x0_value"]))

    @property
    def dim(self) -> int:
        return self.x0.shape[0]

    def parameters(self) -> Dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "A": self.A.tolist(),
                "Q": self.Q.tolist(), "x0": self.x0.tolist()}

    def initial_state(self) -> np.ndarray:
        return self.x0.copy()

    def step(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal(x.shape)
        return x @ self.A.T + noise @ self.chol_q.T


@dataclass(eq=False)
class Lorenz96System:
    """Lorenz-96 ring integrated with RK4, cycle_length steps per assimilation step"""

    dim: int = 40
    forcing: float = 8.0
    dt: float = 0.01
    cycle_length: int = 10
    model_noise_std: float = 0.0
    kind: str = field(default=LORENZ96, init=False)

    def __post_init__(self):
        if self.dim < 4:
            raise ConfigError(f"Lorenz-96 needs dim >= 4, got {self.dim}", key="dynamics.dim")
        if not self.dt > 0:
            raise ConfigError("dynamics.dt must be positive", key="dynamics.dt")
        if self.cycle_length < 1:
            raise ConfigError("dynamics.cycle_length must be >= 1", key="dynamics.cycle_length")
        if self.model_noise_std < 0:
            raise ConfigError("dynamics.model_noise_std must be >= 0", key="dynamics.model_noise_std")

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> "Lorenz96System":
        return cls(
            dim=section["dim"],
            forcing=section["forcing"],
            dt=section["dt"],
            cycle_length=section["cycle_length"],
            model_noise_std=section["model_noise_std"],
        )

    def parameters(self) -> Dict[str, Any]:
        return {"kind": self.kind, "dim": self.dim, "forcing": self.forcing, "dt": self.dt,
                "cycle_length": self.cycle_length, "model_noise_std": self.model_noise_std}

    def tendency(self, x: np.ndarray) -> np.ndarray:
        xm2 = np.roll(x, 2, axis=-1)
        xm1 = np.roll(x, 1, axis=-1)
        xp1 = np.roll(x, -1, axis=-1)
        return (xp1 - xm2) * xm1 - x + self.forcing

    def rk4_step(self, x: np.ndarray, dt: Optional[float] = None) -> np.ndarray:
        h = self.dt if dt is None else dt
        k1 = self.tendency(x)
        k2 = self.tendency(x + 0.5 * h * k1)
        k3 = self.tendency(x + 0.5 * h * k2)
        k4 = self.tendency(x + h * k3)
        return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def integrate(self, x: np.ndarray, n_steps: int, dt: Optional[float] = None) -> np.ndarray:
        for _ in range(n_steps):
            x = self.rk4_step(x, dt)
        return x

    def initial_state(self) -> np.ndarray:
        x = np.full(self.dim, self.forcing)
        x[0] += 0.01
        return x

    def step(self, x: np.ndarray, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        x = self.integrate(x, self.cycle_length)
        if self.model_noise_std > 0:
            x = x + self.model_noise_std * rng.standard_normal(x.shape)
        return x


System = Union[LinearGaussianSSM, Lorenz96System]


@dataclass(eq=False)
class ObservationModel:
    """y = H x + e, e ~ N(0, diag(noise_std^2))"""

    H: np.ndarray
    noise_std: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=np.float64))
        m, d = self.H.shape
        self.noise_std = np.broadcast_to(
            np.asarray(self.noise_std, dtype=np.float64), (m,)).copy()
        if m > d:
            raise ShapeMismatchError(f"Observation operator has more rows ({m}) than state dims ({d})")
        if np.any(self.noise_std <= 0) or not np.all(np.isfinite(self.noise_std)):
            raise ConfigError("observation.noise_std must be finite and > 0",
                              key="observation.noise_std")

    @classmethod
    def strided(cls, dim: int, stride: int = 4, noise_std: float = 0.1,
                offset: int = 0) -> "ObservationModel":
        """Coordinate-subsampling mask observing indices offset, offset+stride, ..."""
        if stride < 1 or not 0 <= offset < dim:
            raise ConfigError(f"Invalid stride {stride} / offset {offset} for dim {dim}",
                              key="observation.stride")
        indices = np.arange(offset, dim, stride)
        H = np.zeros((indices.size, dim))
        H[np.arange(indices.size), indices] = 1.0
        return cls(H=H, noise_std=noise_std)

    @classmethod
    def from_config(cls, section: Dict[str, Any], dim: int) -> "ObservationModel":
        return cls.strided(dim, section["stride"], section["noise_std"], section["offset"])

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @property
    def noise_var(self) -> np.ndarray:
        return self.noise_std**2

    @property
    def covariance(self) -> np.ndarray:
        return np.diag(self.noise_var)

    @property
    def observed_indices(self) -> np.ndarray:
        """State coordinates read by the rows of H (nonzero columns)"""
        return np.flatnonzero(np.any(self.H != 0, axis=0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x @ self.H.T

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        return v @ self.H

    def parameters(self) -> Dict[str, Any]:
        return {"m": self.m, "dim": self.dim, "noise_std": self.noise_std.tolist(),
                "observed_indices": self.observed_indices.tolist()}


@dataclass(eq=False)
class TwinDataset:
    truth: np.ndarray
    observations: np.ndarray
    system: System
    obs: ObservationModel
    seed: int
    spin_up_steps: int = 0

    @property
    def steps(self) -> int:
        return self.observations.shape[0]


def _check_dim(x: np.ndarray, dim: int, what: str):
    if x.shape[-1] != dim:
        raise ShapeMismatchError(f"{what} has dimension {x.shape[-1]}, expected {dim}")


def step_truth(system: System, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Advance the true state by one assimilation step"""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x, system.dim, "State")
    return system.step(x, rng)


def observe(obs: ObservationModel, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Noisy linear observation of a state"""
    x = np.asarray(x, dtype=np.float64)
    _check_dim(x, obs.dim, "State")
    y = obs.apply(x)
    return y + obs.noise_std * rng.standard_normal(y.shape)


def spin_up(system: System, x: np.ndarray, n_integrator_steps: int) -> np.ndarray:
    """Discard the first integrator steps so the state lies on the attractor"""
    if isinstance(system, Lorenz96System) and n_integrator_steps > 0:
        return system.integrate(x, n_integrator_steps)
    return x


def generate_truth_and_obs(system: System, obs: ObservationModel, K: int, seed: int,
                           spin_up_steps: int = 0) -> TwinDataset:
    """Truth trajectory x^{0:K} and observations y^{1:K} for a twin experiment"""
    if K < 1:
        raise DomainError(f"A twin experiment needs K >= 1 steps, got {K}")
    if obs.dim != system.dim:
        raise ShapeMismatchError(f"Observation operator expects dim {obs.dim}, system has {system.dim}")

    dynamics_rng = stream(seed, 0)
    obs_rng = stream(seed, 1)

    x = spin_up(system, system.initial_state(), spin_up_steps)
    truth = np.empty((K + 1, system.dim))
    observations = np.empty((K, obs.m))
    truth[0] = x
    for k in range(1, K + 1):
        x = step_truth(system, x, dynamics_rng)
        truth[k] = x
        observations[k - 1] = observe(obs, x, obs_rng)

    logger.info(f"Generated {system.kind} twin data: K={K}, d={system.dim}, m={obs.m}, seed={seed}")
    return TwinDataset(truth=truth, observations=observations, system=system, obs=obs,
                       seed=seed, spin_up_steps=spin_up_steps)


def training_pairs(system: System, n_pairs: int, seed: int, spin_up_steps: int = 0,
                   n_chains: int = 64) -> tuple:
    """Transition pairs (x^k, x^{k+1}) from independent chains of the system"""
    if n_pairs < 1:
        raise DomainError(f"n_pairs must be positive, got {n_pairs}")

    rng = stream(seed, 2)
    n_chains = min(n_chains, n_pairs)
    x = system.initial_state() + 0.01 * rng.standard_normal((n_chains, system.dim))
    x = spin_up(system, x, spin_up_steps)

    previous, following = [], []
    for _ in range(int(np.ceil(n_pairs / n_chains))):
        x_next = system.step(x, rng)
        previous.append(x)
        following.append(x_next)
        x = x_next

    x_prev = np.concatenate(previous)[:n_pairs]
    x_next = np.concatenate(following)[:n_pairs]
    return x_prev, x_next


def system_from_config(config: Dict[str, Any]) -> System:
    """Build the configured ground-truth system"""
    section = config["dynamics"]
    if section["system"] == LORENZ96:
        return Lorenz96System.from_config(section)
    if section["system"] == LINEAR_GAUSSIAN:
        return LinearGaussianSSM.from_config(section)
    raise ConfigError(f"Unknown system '{section['system']}'", key="dynamics.system")


def system_from_parameters(params: Dict[str, Any]) -> System:
    """Rebuild a system from the parameters stored in a dataset sidecar"""
    if params["kind"] == LORENZ96:
        return Lorenz96System(dim=params["dim"], forcing=params["forcing"], dt=params["dt"],
                              cycle_length=params["cycle_length"],
                              model_noise_std=params["model_noise_std"])
    return LinearGaussianSSM(A=np.asarray(params["A"]), Q=np.asarray(params["Q"]),
                             x0=np.asarray(params["x0"]))
