"""Noise schedules, forward noising, DDIM and flow-matching backward steps.

Timestep convention: indices ``0 .. T-1`` address the schedule tables and the
sentinel :data:`CLEAN` (``-1``) stands for the noise-free end of sampling,
where ``alpha_bar`` is taken to be exactly one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .errors import DegenerateInputError, DegenerateSamplingError, NumericFault
from .numeric import DTYPE, NUMERIC_FLOOR, RngStream, Tensor

CLEAN = -1
RADICAND_SLACK = 1e-12

# (x_t, t) -> predicted noise (or velocity), same shape as x_t
NoisePredictor = Callable[[Tensor, int], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor

    def abar(self, t: int) -> float:
        if t == CLEAN:
            return 1.0
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return float(self.alpha_bar[t])


@dataclass(frozen=True)
class FlowSchedule:
    """Rectified-flow style schedule ``x_t = a'_t x_0 + s'_t eps``; data sits at t = 0."""

    T: int
    alpha_prime: Tensor
    sigma_prime: Tensor


@dataclass
class SamplerConfig:
    eta: float = 0.0
    inference_timesteps: list[int] = field(default_factory=lambda: inference_timesteps(1000, 20))
    guidance_scale_sampling: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        ts = list(self.inference_timesteps)
        if any(b >= a for a, b in zip(ts, ts[1:])):
            raise ValueError("inference timesteps must be strictly decreasing")
        if self.guidance_scale_sampling < 1.0:
            raise ValueError("guidance scale must be >= 1")


@dataclass
class Trajectory:
    """(t, x_t) pairs from the initial latent down to the clean output."""

    steps: list[tuple[int, Tensor]]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def final(self) -> Tensor:
        return self.steps[-1][1]

    @property
    def timesteps(self) -> list[int]:
        return [t for t, _ in self.steps]


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = torch.linspace(beta_start, beta_end, T, dtype=DTYPE)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, dim=0))


def schedule_from_betas(betas: Sequence[float]) -> NoiseSchedule:
    beta = torch.as_tensor(list(betas), dtype=DTYPE)
    if beta.numel() < 2 or not ((beta > 0) & (beta < 1)).all():
        raise ValueError("need at least two betas inside (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(T=beta.numel(), beta=beta, alpha=alpha, alpha_bar=torch.cumprod(alpha, dim=0))


def inference_timesteps(T: int, n_steps: int) -> list[int]:
    """Evenly strided timesteps, e.g. T=1000, n=20 -> [950, 900, ..., 50, 0]."""
    if not 1 <= n_steps <= T:
        raise ValueError("need 1 <= n_steps <= T")
    stride = T // n_steps
    return [stride * i for i in reversed(range(n_steps))]


def previous_timestep(timesteps: Sequence[int], i: int) -> int:
    return timesteps[i + 1] if i + 1 < len(timesteps) else CLEAN


def forward_noise(x0: Tensor, t: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    ab = schedule.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def forward_noise_batch(x0: Tensor, t: Tensor, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Per-row timesteps ``t`` (LongTensor ``[B]``)."""
    ab = schedule.alpha_bar[t].reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def predict_x0(x_t: Tensor, eps_pred: Tensor, t: int, schedule: NoiseSchedule) -> Tensor:
    ab = schedule.abar(t)
    if ab <= NUMERIC_FLOOR:
        raise DegenerateInputError(f"alpha_bar at t={t} is below the numeric floor")
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def _checked_sqrt(radicand: float, what: str) -> float:
    if radicand < -RADICAND_SLACK:
        raise NumericFault(f"negative radicand {radicand:.3e} in {what}")
    return math.sqrt(max(radicand, 0.0))


def ddim_sigma(t: int, t_prev: int, eta: float, schedule: NoiseSchedule) -> float:
    """DDIM step std; for strided steps ``alpha_t`` becomes ``abar_t / abar_prev``."""
    if t <= t_prev:
        raise ValueError(f"need t > t_prev, got {t} <= {t_prev}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must be in [0, 1]")
    if eta == 0.0:
        return 0.0
    ab_t, ab_prev = schedule.abar(t), schedule.abar(t_prev)
    step_alpha = ab_t / ab_prev
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * _checked_sqrt(1.0 - step_alpha, "ddim_sigma")


def ddim_mean(x_t: Tensor, eps_pred: Tensor, t: int, t_prev: int, sigma: float, schedule: NoiseSchedule) -> Tensor:
    ab_prev = schedule.abar(t_prev)
    x0_hat = predict_x0(x_t, eps_pred, t, schedule)
    direction = _checked_sqrt(1.0 - ab_prev - sigma * sigma, "ddim_step")
    return math.sqrt(ab_prev) * x0_hat + direction * eps_pred


def step_coefficients(t: int, t_prev: int, eta: float, schedule: NoiseSchedule) -> tuple[float, float, float, float]:
    """Linear form of the DDIM mean, ``mean = c_x * x_t + c_eps * eps``.

    Returns ``(c_x, c_eps, sigma, abar_prev)``.
    """
    sigma = ddim_sigma(t, t_prev, eta, schedule)
    ab_t, ab_prev = schedule.abar(t), schedule.abar(t_prev)
    if ab_t <= NUMERIC_FLOOR:
        raise DegenerateInputError(f"alpha_bar at t={t} is below the numeric floor")
    direction = _checked_sqrt(1.0 - ab_prev - sigma * sigma, "ddim_step")
    c_x = math.sqrt(ab_prev / ab_t)
    c_eps = direction - math.sqrt(ab_prev) * math.sqrt(1.0 - ab_t) / math.sqrt(ab_t)
    return c_x, c_eps, sigma, ab_prev


def ddim_mean_batch(x_t: Tensor, eps_pred: Tensor, c_x: Tensor, c_eps: Tensor) -> Tensor:
    """DDIM means for rows with different timesteps, from per-row coefficients."""
    view = (-1,) + (1,) * (x_t.dim() - 1)
    return c_x.reshape(view) * x_t + c_eps.reshape(view) * eps_pred


def ddim_step(
    x_t: Tensor,
    eps_pred: Tensor,
    t: int,
    t_prev: int,
    eta: float,
    noise: Tensor | None,
    schedule: NoiseSchedule,
) -> tuple[Tensor, Tensor, float]:
    """One stochastic DDIM transition. Returns ``(x_prev, mean, sigma)``."""
    sigma = ddim_sigma(t, t_prev, eta, schedule)
    mean = ddim_mean(x_t, eps_pred, t, t_prev, sigma, schedule)
    if sigma == 0.0 or noise is None:
        return mean, mean, sigma
    if noise.shape != x_t.shape:
        raise ValueError("noise shape must match x_t")
    return mean + sigma * noise, mean, sigma


def sample_group(
    x_parent: Tensor,
    t: int,
    t_prev: int,
    denoiser_eval: NoisePredictor,
    K: int,
    eta: float,
    rng: RngStream,
    schedule: NoiseSchedule,
) -> list[tuple[Tensor, Tensor, float]]:
    """K children of one parent latent; child ``i`` uses stream ``rng.derive(i)``.

    The denoiser is evaluated once, so all candidates share mean and sigma.
    """
    if K < 2:
        raise ValueError("group sampling needs K >= 2")
    eps = denoiser_eval(x_parent, t)
    sigma = ddim_sigma(t, t_prev, eta, schedule)
    if sigma == 0.0:
        warnings.warn(DegenerateSamplingError(f"sigma is zero at t={t}; all {K} candidates coincide"))
    mean = ddim_mean(x_parent, eps, t, t_prev, sigma, schedule)
    group = []
    for i in range(K):
        noise = rng.derive(i).normal(x_parent.shape)
        group.append((mean + sigma * noise, mean, sigma))
    return group


def linear_flow_schedule(T: int = 1000) -> FlowSchedule:
    s = torch.arange(T, dtype=DTYPE) / T
    return FlowSchedule(T=T, alpha_prime=1.0 - s, sigma_prime=s)


def _flow_coeffs(t: int, fs: FlowSchedule) -> tuple[float, float]:
    if t == CLEAN:
        return 1.0, 0.0
    return float(fs.alpha_prime[t]), float(fs.sigma_prime[t])


def flow_sigma(t: int, t_prev: int, eta: float, fs: FlowSchedule) -> float:
    if t <= t_prev:
        raise ValueError(f"need t > t_prev, got {t} <= {t_prev}")
    a_t, s_t = _flow_coeffs(t, fs)
    a_p, s_p = _flow_coeffs(t_prev, fs)
    if s_t <= NUMERIC_FLOOR:
        raise DegenerateInputError(f"sigma' at t={t} is below the numeric floor")
    if eta == 0.0:
        return 0.0
    return eta * _checked_sqrt((s_p / s_t) ** 2 * (1.0 - (a_t / a_p) ** 2), "flow_sigma")


def flow_backward_step(
    x_t: Tensor,
    v_pred: Tensor,
    t: int,
    t_prev: int,
    eta: float,
    noise: Tensor | None,
    fs: FlowSchedule,
) -> tuple[Tensor, Tensor, float]:
    """SDE form of a flow-matching step, velocity ``v = eps - x_0``.

    ``x_prev = a'_prev (x_t - s'_t v) + sqrt(s'_prev^2 - sigma^2) (a'_t v + x_t) + sigma * noise``
    """
    sigma = flow_sigma(t, t_prev, eta, fs)
    a_t, s_t = _flow_coeffs(t, fs)
    a_p, s_p = _flow_coeffs(t_prev, fs)
    x0_hat = x_t - s_t * v_pred
    eps_hat = a_t * v_pred + x_t
    mean = a_p * x0_hat + _checked_sqrt(s_p * s_p - sigma * sigma, "flow_backward_step") * eps_hat
    if sigma == 0.0 or noise is None:
        return mean, mean, sigma
    return mean + sigma * noise, mean, sigma


def full_denoise(
    x_T: Tensor,
    denoiser_eval: NoisePredictor,
    config: SamplerConfig,
    rng: RngStream | None,
    schedule: NoiseSchedule,
) -> Trajectory:
    """Run DDIM over ``config.inference_timesteps`` and a final step to :data:`CLEAN`.

    Step ``i`` draws its noise from ``rng.derive("step", i)``; with ``eta == 0``
    no noise is drawn and ``rng`` may be None.
    """
    ts = list(config.inference_timesteps)
    x = x_T
    steps = [(ts[0], x)]
    for i, t in enumerate(ts):
        t_prev = previous_timestep(ts, i)
        eps = denoiser_eval(x, t)
        noise = None
        if config.eta > 0.0:
            if rng is None:
                raise ValueError("stochastic sampling needs an RngStream")
            noise = rng.derive("step", i).normal(x.shape)
        x, _, _ = ddim_step(x, eps, t, t_prev, config.eta, noise, schedule)
        steps.append((t_prev, x))
    return Trajectory(steps)
