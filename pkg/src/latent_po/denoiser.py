"""Tiny conditional noise-prediction network with pooled feature taps."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import NoiseSchedule, forward_noise_batch
from .errors import DivergenceError
from .numeric import DTYPE, RngStream, Tensor, avg_pool_spatial, grad

log = logging.getLogger(__name__)

NULL_CONDITION = 0


@dataclass
class DenoiserConfig:
    channels: int = 4
    height: int = 8
    width_px: int = 8
    L: int = 2
    width: int = 16
    n_p: int = 16
    vocab: int = 5
    time_embed_dim: int = 32
    T: int = 1000

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("need at least one down block")
        if self.width < 4 or self.n_p < 4 or self.time_embed_dim < 4:
            raise ValueError("widths must be >= 4")
        if self.height % (2**self.L) or self.width_px % (2**self.L):
            raise ValueError(f"latent size must be divisible by 2**L = {2**self.L}")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width_px)

    @property
    def block_widths(self) -> list[int]:
        # {16, 32} for the defaults; capped at twice the base width
        return [self.width * min(2**i, 2) for i in range(self.L)]

    @property
    def mid_width(self) -> int:
        return self.block_widths[-1]


@dataclass
class FeatureBundle:
    v_down: list[Tensor] = field(default_factory=list)
    v_mid: Tensor | None = None


def timestep_embed(t: Tensor | int, dim: int, max_period: float = 10000.0) -> Tensor:
    """Sinusoidal embedding with interleaved (sin, cos) pairs at geometric frequencies."""
    t = torch.as_tensor(t, dtype=DTYPE).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=DTYPE) / half)
    args = t[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t.shape[0], 2 * half)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ModulatedBlock(nn.Module):
    """conv -> FiLM(emb) -> SiLU -> conv -> SiLU."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        nn.init.zeros_(self.film.weight)
        nn.init.zeros_(self.film.bias)

    def forward(self, h: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(h)
        scale, shift = self.film(emb)[:, :, None, None].chunk(2, dim=1)
        h = F.silu(h * (1.0 + scale) + shift)
        return F.silu(self.conv2(h))


class Denoiser(nn.Module):
    """U-Net-shaped epsilon predictor.

    ``L`` down blocks (each followed by 2x average-pool downsampling), one mid
    block and a mirrored up path with skip connections. Timestep and condition
    embeddings are summed and injected by feature-wise modulation. The pooled
    outputs of every down block and of the mid block are exposed as features.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        emb = config.time_embed_dim
        self.cond_embed = nn.Embedding(config.vocab, config.n_p)
        self.cond_proj = nn.Linear(config.n_p, emb)
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        widths = config.block_widths
        self.downs = nn.ModuleList()
        c_in = config.channels
        for w in widths:
            self.downs.append(ModulatedBlock(c_in, w, emb))
            c_in = w
        self.mid = ModulatedBlock(c_in, config.mid_width, emb)
        self.ups = nn.ModuleList()
        c_in = config.mid_width
        for w in reversed(widths):
            self.ups.append(ModulatedBlock(c_in + w, w, emb))
            c_in = w
        self.out = nn.Conv2d(c_in, config.channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.to(DTYPE)

    def embed_condition(self, cond: Tensor) -> Tensor:
        return self.cond_embed(cond)

    def forward(self, x_t: Tensor, t: Tensor | int, cond: Tensor | int) -> tuple[Tensor, FeatureBundle]:
        cfg = self.config
        if x_t.dim() == 3:
            x_t = x_t.unsqueeze(0)
        if tuple(x_t.shape[1:]) != cfg.latent_shape:
            raise ValueError(f"expected latent shape {cfg.latent_shape}, got {tuple(x_t.shape[1:])}")
        B = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(B)
        cond = torch.as_tensor(cond, dtype=torch.long).reshape(-1).expand(B)
        emb = self.time_mlp(timestep_embed(t, cfg.time_embed_dim)) + self.cond_proj(self.cond_embed(cond))
        emb = F.silu(emb)

        h = x_t
        skips, v_down = [], []
        for block in self.downs:
            h = block(h, emb)
            skips.append(h)
            v_down.append(avg_pool_spatial(h))
            h = F.avg_pool2d(h, 2)
        h = self.mid(h, emb)
        v_mid = avg_pool_spatial(h)
        for block, skip in zip(self.ups, reversed(skips)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.out(h), FeatureBundle(v_down=v_down, v_mid=v_mid)


def denoise_forward(x_t: Tensor, t, cond, net: Denoiser) -> tuple[Tensor, FeatureBundle]:
    return net(x_t, t, cond)


def cfg_eval(x_t: Tensor, t, cond, net: Denoiser, guidance: float) -> Tensor:
    """Classifier-free guided noise prediction; guidance 1 is the plain conditional output."""
    if guidance < 1.0:
        raise ValueError("guidance must be >= 1")
    eps_cond, _ = net(x_t, t, cond)
    if guidance == 1.0:
        return eps_cond
    eps_uncond, _ = net(x_t, t, torch.zeros_like(torch.as_tensor(cond, dtype=torch.long)))
    return eps_uncond + guidance * (eps_cond - eps_uncond)


def predictor(net: Denoiser, cond, guidance: float = 1.0):
    """Bind ``net`` and ``cond`` into the ``(x_t, t) -> eps`` callback the samplers take."""

    def _eval(x_t: Tensor, t: int) -> Tensor:
        return cfg_eval(x_t, t, cond, net, guidance)

    return _eval


def clone_frozen(net: nn.Module) -> nn.Module:
    ref = copy.deepcopy(net)
    for p in ref.parameters():
        p.requires_grad_(False)
    return ref


def sgd(params, lr: float, momentum: float = 0.9) -> torch.optim.SGD:
    return torch.optim.SGD(list(params), lr=lr, momentum=momentum)


def apply_grads(params: list[Tensor], grads: list[Tensor], opt: torch.optim.Optimizer, clip: float | None = None):
    if clip is not None:
        total = torch.sqrt(sum((g * g).sum() for g in grads))
        if total > clip:
            grads = [g * (clip / total) for g in grads]
    for p, g in zip(params, grads):
        p.grad = g
    opt.step()


class DivergenceGuard:
    """Aborts when the loss exceeds ``factor`` times its initial value for ``patience`` steps."""

    def __init__(self, factor: float = 10.0, patience: int = 100):
        self.factor, self.patience = factor, patience
        self.initial: float | None = None
        self.bad = 0

    def update(self, loss: float, step: int):
        if self.initial is None:
            self.initial = loss
            return
        self.bad = self.bad + 1 if loss > self.factor * self.initial else 0
        if self.bad >= self.patience:
            raise DivergenceError(
                f"loss {loss:.4g} above {self.factor}x initial {self.initial:.4g} "
                f"for {self.bad} steps (step {step})"
            )


def eps_mse_loss(net: Denoiser, x0: Tensor, cond: Tensor, t: Tensor, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    x_t = forward_noise_batch(x0, t, eps, schedule)
    eps_pred, _ = net(x_t, t, cond)
    return ((eps - eps_pred) ** 2).mean()


def pretrain_denoiser(
    x0: Tensor,
    cond: Tensor,
    net: Denoiser,
    schedule: NoiseSchedule,
    steps: int,
    lr: float,
    rng: RngStream,
    batch_size: int = 64,
    cond_dropout: float = 0.1,
    clip: float | None = 1.0,
) -> tuple[Denoiser, list[float]]:
    """Epsilon-prediction MSE training with condition dropout to the null id.

    Returns the trained net (trained in place) and the per-step loss curve.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty dataset")
    params = [p for p in net.parameters() if p.requires_grad]
    opt = sgd(params, lr)
    guard = DivergenceGuard()
    curve = []
    n = x0.shape[0]
    for step in range(steps):
        r = rng.derive("pretrain", step)
        idx = r.integers(0, n, size=batch_size)
        t = r.integers(0, schedule.T, size=batch_size)
        eps = r.normal((batch_size, *x0.shape[1:]))
        c = cond[idx].clone()
        c[r.uniform((batch_size,)) < cond_dropout] = NULL_CONDITION
        loss = eps_mse_loss(net, x0[idx], c, t, eps, schedule)
        apply_grads(params, grad(loss, params), opt, clip)
        value = loss.item()
        curve.append(value)
        guard.update(value, step)
    return net, curve
