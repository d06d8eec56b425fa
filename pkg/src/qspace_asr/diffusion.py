"""Forward diffusion, angular masking and the masked-denoising training loop.

The forward process corrupts clean slices with Gaussian noise under a
linear variance schedule; training randomly masks whole gradient
directions (ramping the masked ratio up over the run), feeds clean
observed / noisy masked tokens to the network and regresses the injected
noise on the masked directions only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import DiffusionTransformer, ModelConfig, predict_noise
from .phantom import AngularMask, GradientTable


class DiffusionError(ValueError):
    pass


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with double-precision cumulative products."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t) -> np.ndarray:
        """alpha-bar at timestep t (1-based); t=0 returns 1."""
        t = np.asarray(t)
        self._check_t(t, allow_zero=True)
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def beta(self, t) -> np.ndarray:
        t = np.asarray(t)
        self._check_t(t)
        return self.betas[t - 1]

    def _check_t(self, t, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        if np.any(t < lo) or np.any(t > self.n_steps):
            raise DiffusionError(
                f"timestep outside [{lo}, {self.n_steps}]: {np.min(t)}..{np.max(t)}"
            )


def make_schedule(n_steps: int, beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    if n_steps < 1:
        raise DiffusionError("need at least one step")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise DiffusionError(f"invalid beta bounds ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, n_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def forward_diffuse(x0: np.ndarray, t, noise: np.ndarray,
                    schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise; noise supplied explicitly."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if x0.shape != noise.shape:
        raise DiffusionError(f"x0 {x0.shape} vs noise {noise.shape}")
    abar = schedule.alpha_bar(t)
    abar = np.reshape(abar, np.shape(abar) + (1,) * (x0.ndim - np.ndim(abar)))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def sample_mask(k: float, n_directions: int, seed) -> AngularMask:
    """Uniformly random whole-direction mask with round(k*N) masked entries.

    seed: int or numpy Generator. Masked count must land in [1, N-1].
    """
    if not (0.0 < k < 1.0):
        raise DiffusionError(f"mask ratio must be in (0, 1), got {k}")
    n_masked = int(round(k * n_directions))
    if n_masked < 1 or n_masked > n_directions - 1:
        raise DiffusionError(
            f"ratio {k} with {n_directions} directions leaves no observed or "
            f"no masked direction"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    masked = rng.choice(n_directions, size=n_masked, replace=False)
    observed = np.ones(n_directions, dtype=bool)
    observed[masked] = False
    return AngularMask(observed=observed)


RATIO_START = 0.5
RATIO_END = 0.94


def mask_ratio_schedule(iteration: int, total_iterations: int) -> float:
    """Linear ramp of the masked ratio from 0.5 to 0.94 over training."""
    if not (0 <= iteration <= total_iterations):
        raise DiffusionError(f"iteration {iteration} outside [0, {total_iterations}]")
    if total_iterations == 0:
        return RATIO_START
    frac = iteration / total_iterations
    return RATIO_START + (RATIO_END - RATIO_START) * frac


def build_masked_input(x0: np.ndarray, x_t: np.ndarray, mask) -> np.ndarray:
    """M * x0 + (1 - M) * x_t with M = 1 on observed directions (last axis)."""
    x0 = np.asarray(x0)
    x_t = np.asarray(x_t)
    if x0.shape != x_t.shape:
        raise DiffusionError(f"x0 {x0.shape} vs x_t {x_t.shape}")
    observed = mask.observed if isinstance(mask, AngularMask) else np.asarray(mask, bool)
    m = np.broadcast_to(observed, x0.shape).astype(x0.dtype)
    return m * x0 + (1.0 - m) * x_t


def masked_noise_mse(eps_hat: ad.Tensor, eps: np.ndarray, observed: np.ndarray) -> ad.Tensor:
    """Mean squared noise-prediction error over masked-direction elements only."""
    w = np.broadcast_to(~np.asarray(observed, bool), eps_hat.shape)
    count = int(w.sum())
    if count == 0:
        raise DiffusionError("loss needs at least one masked direction")
    w = w.astype(eps_hat.values.dtype)
    diff = ad.sub(eps_hat, ad.tensor(np.asarray(eps, dtype=eps_hat.values.dtype)))
    masked = ad.mul(diff, ad.tensor(w))
    return ad.scale(ad.sum_(ad.mul(masked, masked)), 1.0 / count)


# ---------------------------------------------------------------------------
# Optimizer and training state
# ---------------------------------------------------------------------------

@dataclass
class AdamW:
    """Adam with decoupled weight decay; moments keyed by parameter name."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, ad.Tensor]):
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            p.values = p.values - self.lr * (
                mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.values
            )


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 2000
    batch_size: int = 2
    n_timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    lr: float = 1e-5
    weight_decay: float = 1e-2
    seed: int = 0


@dataclass
class TrainState:
    model: DiffusionTransformer
    optimizer: AdamW
    iteration: int
    rng: np.random.Generator
    config: TrainConfig
    last_info: dict = field(default_factory=dict)

    @classmethod
    def create(cls, model_config: ModelConfig, train_config: TrainConfig) -> "TrainState":
        model = DiffusionTransformer.create(model_config)
        opt = AdamW(lr=train_config.lr, weight_decay=train_config.weight_decay)
        return cls(model=model, optimizer=opt, iteration=0,
                   rng=np.random.default_rng(train_config.seed), config=train_config)


def train_step(state: TrainState, batch_x0: np.ndarray, table: GradientTable,
               schedule: NoiseSchedule) -> float:
    """One masked-denoising update; returns the scalar loss.

    Samples per-slice timesteps, a fresh direction mask at the current
    ramp ratio and Gaussian noise; regresses predicted noise against the
    injected noise on masked directions; applies one AdamW update.
    """
    x0 = np.asarray(batch_x0)
    if x0.ndim != 4 or x0.shape[0] == 0:
        raise DiffusionError(f"batch must be (B, H, W, N), got {x0.shape}")
    b, _, _, n = x0.shape
    rng = state.rng
    t = rng.integers(1, schedule.n_steps + 1, size=b)
    k = mask_ratio_schedule(state.iteration, state.config.total_iterations)
    observed = np.stack([sample_mask(k, n, rng).observed for _ in range(b)])
    noise = rng.standard_normal(x0.shape)
    x_t = forward_diffuse(x0, t, noise, schedule)

    eps_hat = predict_noise(state.model, x_t, x0, observed, t, table)
    loss = masked_noise_mse(eps_hat, noise, observed[:, None, None, :])
    loss_val = float(loss.values)
    if not np.isfinite(loss_val):
        raise NonFiniteLossError(
            f"non-finite loss at iteration {state.iteration}",
            snapshot={
                "iteration": state.iteration,
                "timesteps": t.tolist(),
                "mask_ratio": k,
                "loss": loss_val,
            },
        )
    ad.backward(loss)
    state.optimizer.step(state.model.params)
    state.iteration += 1
    state.last_info = {"t_mean": float(t.mean()), "mask_ratio": k}
    return loss_val
