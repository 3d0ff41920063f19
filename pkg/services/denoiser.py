"""Conditional denoisers d(x_t, x_prev, t) ~ E[x^{k+1} | x^k = x_prev, x_t^{k+1} = x_t].

Two back-ends share the ``DenoiserInterface`` protocol: the exact conjugate
mean of a linear-Gaussian system and a small preconditioned MLP trained by
denoising score matching. Both take a leading batch axis on ``x_t``; ``x_prev``
broadcasts against it.
"""

from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from services.dynamics import LinearGaussianSSM
from services.schedule import NoiseSchedule
from utils.errors import ConfigError, DomainError, ShapeMismatchError, TrainingDivergedError
from utils.logging import get_logger
from utils.rng import stream

logger = get_logger(__name__)

Layers = List[Tuple[np.ndarray, np.ndarray]]


class DenoiserInterface(Protocol):
    schedule: NoiseSchedule

    def evaluate(self, x_t: np.ndarray, x_prev: np.ndarray, t: float) -> np.ndarray:
        ...

    def vjp(self, x_t: np.ndarray, x_prev: np.ndarray, t: float, u: np.ndarray) -> np.ndarray:
        ...


def _noise_level(schedule: NoiseSchedule, t: float) -> Tuple[float, float]:
    alpha, sigma, _, _ = schedule.coefficients(t)
    if not sigma > 0:
        raise DomainError(f"Denoising needs sigma_t > 0, got sigma={sigma} at t={t}")
    return alpha, sigma


@dataclass(eq=False)
class AnalyticLGDenoiser:
    """Exact conditional mean of the Gaussian pair N(A x_prev, Q), N(alpha x, sigma^2 I)"""

    ssm: LinearGaussianSSM
    schedule: NoiseSchedule

    def __post_init__(self):
        # Q = U diag(lam) U^T
        self.eigenvalues, self.eigenvectors = np.linalg.eigh(self.ssm.Q)

    @property
    def dim(self) -> int:
        return self.ssm.dim

    def _gains(self, t: float) -> Tuple[np.ndarray, np.ndarray, float]:
        alpha, sigma = _noise_level(self.schedule, t)
        lam = self.eigenvalues
        shrink = 1.0 / (1.0 + (alpha**2 / sigma**2) * lam)
        return shrink, (alpha / sigma**2) * lam * shrink, alpha

    def evaluate(self, x_t: np.ndarray, x_prev: np.ndarray, t: float) -> np.ndarray:
        shrink, jac_eig, _ = self._gains(t)
        U = self.eigenvectors
        prior = (np.asarray(x_prev) @ self.ssm.A.T) @ U
        return (shrink * prior + jac_eig * (np.asarray(x_t) @ U)) @ U.T

    def vjp(self, x_t: np.ndarray, x_prev: np.ndarray, t: float, u: np.ndarray) -> np.ndarray:
        """u^T (alpha/sigma^2)(Q^-1 + (alpha^2/sigma^2) I)^-1, a symmetric Jacobian"""
        _, jac_eig, _ = self._gains(t)
        U = self.eigenvectors
        return (jac_eig * (np.asarray(u) @ U)) @ U.T

    def jacobian(self, t: float) -> np.ndarray:
        _, jac_eig, _ = self._gains(t)
        U = self.eigenvectors
        return (U * jac_eig) @ U.T


def evaluate_analytic(den: AnalyticLGDenoiser, x_t: np.ndarray, x_prev: np.ndarray,
                      t: float) -> np.ndarray:
    """Closed-form conjugate mean"""
    return den.evaluate(x_t, x_prev, t)


def score_from_denoiser(den: DenoiserInterface, x_t: np.ndarray, x_prev: np.ndarray, t: float,
                        schedule: NoiseSchedule, denoised: Optional[np.ndarray] = None) -> np.ndarray:
    """Tweedie score sigma^-2 (alpha d(x_t, x_prev, t) - x_t)"""
    alpha, sigma = _noise_level(schedule, t)
    if denoised is None:
        denoised = den.evaluate(x_t, x_prev, t)
    return (alpha * denoised - x_t) / sigma**2


def silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def preconditioning(sigma: np.ndarray, sigma_data: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """EDM skip, output and input scalings for noise level sigma"""
    total = sigma**2 + sigma_data**2
    c_skip = sigma_data**2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    return c_skip, c_out, c_in


def loss_weight(sigma: np.ndarray, sigma_data: float) -> np.ndarray:
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def _forward(layers: Layers, h: np.ndarray):
    pre_acts, acts = [], [h]
    for i, (W, b) in enumerate(layers):
        z = h @ W.T + b
        if i == len(layers) - 1:
            return z, pre_acts, acts
        h = silu(z)
        pre_acts.append(z)
        acts.append(h)


def _backward(layers: Layers, pre_acts: list, acts: list, g_out: np.ndarray,
              param_grads: bool = False):
    """Reverse pass; returns the input cotangent and optionally the parameter gradients"""
    grads = []
    g = g_out
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if param_grads:
            grads.append((g.T @ acts[i], g.sum(axis=0)))
        g = g @ W
        if i > 0:
            g = g * silu_grad(pre_acts[i - 1])
    return g, grads[::-1]


def flatten_params(layers: Layers) -> np.ndarray:
    """Parameters in the order W1, b1, W2, b2, ..."""
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def unflatten_params(flat: np.ndarray, widths: Sequence[int]) -> Layers:
    expected = param_count(widths)
    if flat.size != expected:
        raise ShapeMismatchError(f"Expected {expected} parameters for widths {list(widths)}, got {flat.size}")
    layers, offset = [], 0
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = flat[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = flat[offset:offset + fan_out]
        offset += fan_out
        layers.append((W.copy(), b.copy()))
    return layers


def param_count(widths: Sequence[int]) -> int:
    return sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(widths[:-1], widths[1:]))


@dataclass(eq=False)
class MlpDenoiser:
    """Preconditioned MLP on [c_in (x_t/alpha - mu); (x_prev - mu)/sigma_data; log sigma]"""

    widths: List[int]
    layers: Layers
    sigma_data: float
    data_mean: np.ndarray
    schedule: NoiseSchedule

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        d = self.widths[-1]
        if self.widths[0] != 2 * d + 1:
            raise ShapeMismatchError(f"Input width must be 2d+1 = {2 * d + 1}, got {self.widths[0]}")
        self.data_mean = np.broadcast_to(np.asarray(self.data_mean, dtype=np.float64), (d,)).copy()
        if not self.sigma_data > 0:
            raise DomainError(f"sigma_data must be positive, got {self.sigma_data}")
        if not all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in self.layers):
            raise DomainError("MLP parameters must be finite")

    @classmethod
    def initialize(cls, dim: int, hidden: Sequence[int], schedule: NoiseSchedule,
                   rng: np.random.Generator, sigma_data: float = 1.0,
                   data_mean: Optional[np.ndarray] = None) -> "MlpDenoiser":
        widths = [2 * dim + 1, *hidden, dim]
        layers = [
            (rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in), np.zeros(fan_out))
            for fan_in, fan_out in zip(widths[:-1], widths[1:])
        ]
        mean = np.zeros(dim) if data_mean is None else data_mean
        return cls(widths=widths, layers=layers, sigma_data=sigma_data, data_mean=mean,
                   schedule=schedule)

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def param_count(self) -> int:
        return param_count(self.widths)

    def flat_params(self) -> np.ndarray:
        return flatten_params(self.layers)

    def _inputs(self, x_scaled: np.ndarray, x_prev: np.ndarray, sigma_eff: np.ndarray, c_in):
        log_sigma = np.broadcast_to(np.log(sigma_eff), (x_scaled.shape[0], 1))
        return np.concatenate([
            c_in * (x_scaled - self.data_mean),
            (x_prev - self.data_mean) / self.sigma_data,
            log_sigma,
        ], axis=1)

    def _rows(self, x_t: np.ndarray, x_prev: np.ndarray):
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape[-1] != self.dim:
            raise ShapeMismatchError(f"State has dimension {x_t.shape[-1]}, model expects {self.dim}")
        x_prev = np.broadcast_to(np.asarray(x_prev, dtype=np.float64), x_t.shape)
        return x_t.reshape(-1, self.dim), x_prev.reshape(-1, self.dim), x_t.shape

    def _run(self, x_t: np.ndarray, x_prev: np.ndarray, t: float):
        alpha, sigma = _noise_level(self.schedule, t)
        rows_t, rows_prev, shape = self._rows(x_t, x_prev)
        sigma_eff = sigma / alpha
        x_scaled = rows_t / alpha
        c_skip, c_out, c_in = preconditioning(sigma_eff, self.sigma_data)
        h0 = self._inputs(x_scaled, rows_prev, np.asarray(sigma_eff), c_in)
        out, pre_acts, acts = _forward(self.layers, h0)
        denoised = self.data_mean + c_skip * (x_scaled - self.data_mean) + c_out * out
        return denoised, shape, (alpha, c_skip, c_out, c_in, pre_acts, acts)

    def evaluate(self, x_t: np.ndarray, x_prev: np.ndarray, t: float) -> np.ndarray:
        denoised, shape, _ = self._run(x_t, x_prev, t)
        return denoised.reshape(shape)

    def vjp(self, x_t: np.ndarray, x_prev: np.ndarray, t: float, u: np.ndarray) -> np.ndarray:
        _, shape, (alpha, c_skip, c_out, c_in, pre_acts, acts) = self._run(x_t, x_prev, t)
        u = np.broadcast_to(np.asarray(u, dtype=np.float64), shape).reshape(-1, self.dim)
        g_in, _ = _backward(self.layers, pre_acts, acts, c_out * u)
        grad = (c_skip * u + c_in * g_in[:, :self.dim]) / alpha
        return grad.reshape(shape)


def vjp_mlp(den: MlpDenoiser, x_t: np.ndarray, x_prev: np.ndarray, t: float,
            u: np.ndarray) -> np.ndarray:
    """Reverse-mode u-weighted gradient of the MLP output with respect to x_t"""
    return den.vjp(x_t, x_prev, t, u)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 256
    learning_rate: float = 1e-3
    hidden: List[int] = field(default_factory=lambda: [128, 128])
    heldout_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 1
    noise_law: str = "log-uniform"
    weighting: str = "edm"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("train.epochs must be >= 0", key="train.epochs")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1", key="train.batch_size")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate must be positive", key="train.learning_rate")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("train.hidden must list positive widths", key="train.hidden")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise ConfigError("train.heldout_fraction must lie in [0, 1)", key="train.heldout_fraction")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in [0, 1)", key="train.beta1")
        if self.noise_law != "log-uniform" or self.weighting != "edm":
            raise ConfigError("Only log-uniform noise levels with EDM weighting are supported")

    @classmethod
    def from_config(cls, section: dict) -> "TrainConfig":
        return cls(
            epochs=section["epochs"],
            batch_size=section["batch_size"],
            learning_rate=section["learning_rate"],
            hidden=list(section["hidden"]),
            heldout_fraction=section["heldout_fraction"],
            beta1=section["beta1"],
            beta2=section["beta2"],
            seed=section["seed"],
        )


class EpochStats(NamedTuple):
    epoch: int
    train_loss: float
    heldout_loss: float
    baseline_loss: float


class _NoisyBatch(NamedTuple):
    x_scaled: np.ndarray
    sigma_eff: np.ndarray


def _noise_batch(schedule: NoiseSchedule, x_clean: np.ndarray, rng: np.random.Generator) -> _NoisyBatch:
    """x_t = alpha x + sigma z with sigma log-uniform between sigma_0 and sigma_1"""
    log_lo, log_hi = np.log(schedule.sigma(0.0)), np.log(schedule.sigma_1)
    sigma = np.exp(rng.uniform(log_lo, log_hi, size=(x_clean.shape[0], 1)))
    t = schedule.time_from_sigma(sigma)
    alpha = schedule.alpha(t)
    sigma = schedule.sigma(t)
    x_t = alpha * x_clean + sigma * rng.standard_normal(x_clean.shape)
    return _NoisyBatch(x_scaled=x_t / alpha, sigma_eff=sigma / alpha)


def _batch_loss(model: MlpDenoiser, batch: _NoisyBatch, x_prev: np.ndarray, x_clean: np.ndarray,
                grads: bool = False):
    sigma_eff = batch.sigma_eff
    c_skip, c_out, c_in = preconditioning(sigma_eff, model.sigma_data)
    h0 = model._inputs(batch.x_scaled, x_prev, sigma_eff, c_in)
    out, pre_acts, acts = _forward(model.layers, h0)
    denoised = model.data_mean + c_skip * (batch.x_scaled - model.data_mean) + c_out * out
    weight = loss_weight(sigma_eff, model.sigma_data)
    residual = denoised - x_clean
    loss = float(np.mean(weight * residual**2))
    if not grads:
        return loss, None

    g_out = c_out * 2.0 * weight * residual / residual.size
    _, param_grads = _backward(model.layers, pre_acts, acts, g_out, param_grads=True)
    return loss, param_grads


def _baseline_loss(model: MlpDenoiser, batch: _NoisyBatch, x_clean: np.ndarray) -> float:
    """Loss of the trivial predictor x_t / alpha"""
    weight = loss_weight(batch.sigma_eff, model.sigma_data)
    return float(np.mean(weight * (batch.x_scaled - x_clean) ** 2))


class _Adam:
    def __init__(self, layers: Layers, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self.m = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]
        self.v = [(np.zeros_like(W), np.zeros_like(b)) for W, b in layers]

    def update(self, layers: Layers, grads: Layers) -> Layers:
        cfg = self.cfg
        self.step_count += 1
        bias1 = 1.0 - cfg.beta1**self.step_count
        bias2 = 1.0 - cfg.beta2**self.step_count
        updated = []
        for i, (params, grad) in enumerate(zip(layers, grads)):
            new_m, new_v, new_p = [], [], []
            for p, g, m, v in zip(params, grad, self.m[i], self.v[i]):
                m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
                v = cfg.beta2 * v + (1.0 - cfg.beta2) * g**2
                new_p.append(p - cfg.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + cfg.eps))
                new_m.append(m)
                new_v.append(v)
            self.m[i] = tuple(new_m)
            self.v[i] = tuple(new_v)
            updated.append(tuple(new_p))
        return updated


def train_denoiser(pairs: Tuple[np.ndarray, np.ndarray], schedule: NoiseSchedule, cfg: TrainConfig,
                   on_epoch: Optional[Callable[[EpochStats], None]] = None,
                   progress: bool = False) -> MlpDenoiser:
    """Fit an MlpDenoiser to transition pairs (x^k, x^{k+1}) by weighted denoising loss"""
    x_prev, x_next = (np.asarray(a, dtype=np.float64) for a in pairs)
    if x_prev.ndim != 2 or x_prev.shape[0] == 0:
        raise DomainError("Training needs a nonempty (n, d) array of pairs")
    if x_prev.shape != x_next.shape:
        raise ShapeMismatchError(f"Pair arrays differ in shape: {x_prev.shape} vs {x_next.shape}")

    rng = stream(cfg.seed, 0)
    n, d = x_next.shape
    order = rng.permutation(n)
    n_held = int(n * cfg.heldout_fraction) if n > 1 else 0
    held_idx, train_idx = order[:n_held], order[n_held:]

    data_mean = x_next[train_idx].mean(axis=0)
    sigma_data = float(np.std(x_next[train_idx] - data_mean)) or 1.0
    model = MlpDenoiser.initialize(d, cfg.hidden, schedule, rng, sigma_data, data_mean)
    logger.info(f"Training MLP denoiser {model.widths} on {train_idx.size} pairs "
                f"({n_held} held out), sigma_data={sigma_data:.4f}")

    held_batch = None
    if n_held:
        held_batch = _noise_batch(schedule, x_next[held_idx], stream(cfg.seed, 1))

    optimizer = _Adam(model.layers, cfg)
    last_finite = None
    epochs = tqdm(range(cfg.epochs), desc="train", disable=not progress)
    for epoch in epochs:
        perm = train_idx[rng.permutation(train_idx.size)]
        losses = []
        for batch_no, start in enumerate(range(0, perm.size, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            batch = _noise_batch(schedule, x_next[idx], rng)
            loss, grads = _batch_loss(model, batch, x_prev[idx], x_next[idx], grads=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"Non-finite training loss at epoch {epoch}, batch {batch_no}",
                    epoch=epoch, batch=batch_no, last_finite_loss=last_finite)
            last_finite = loss
            losses.append(loss)
            model.layers = optimizer.update(model.layers, grads)

        stats = EpochStats(epoch=epoch, train_loss=float(np.mean(losses)),
                           heldout_loss=float("nan"), baseline_loss=float("nan"))
        if held_batch is not None:
            heldout, _ = _batch_loss(model, held_batch, x_prev[held_idx], x_next[held_idx])
            stats = stats._replace(heldout_loss=heldout,
                                   baseline_loss=_baseline_loss(model, held_batch, x_next[held_idx]))
        logger.debug(f"epoch {epoch}: train={stats.train_loss:.5f} heldout={stats.heldout_loss:.5f}")
        epochs.set_postfix(loss=f"{stats.train_loss:.4f}")
        if on_epoch is not None:
            on_epoch(stats)

    return model
