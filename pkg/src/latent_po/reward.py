"""Latent reward model: noise-aware preference scores from denoiser features."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .denoiser import NULL_CONDITION, Denoiser, DivergenceGuard, apply_grads, sgd
from .diffusion import NoiseSchedule, forward_noise_batch
from .numeric import DTYPE, RngStream, Tensor, grad, l2_normalize

TAU_INIT_LOG = 2.6592


class LrmHead(nn.Module):
    def __init__(self, n_p: int, visual_dim: int, n_d: int = 32, log_tau: float = TAU_INIT_LOG):
        super().__init__()
        self.text_proj = nn.Linear(n_p, n_d, bias=False)
        self.visual_proj = nn.Linear(visual_dim, n_d, bias=False)
        self.log_tau = nn.Parameter(torch.tensor(log_tau, dtype=DTYPE))
        self.to(DTYPE)

    @property
    def tau(self) -> Tensor:
        return self.log_tau.exp()


class Lrm(nn.Module):
    """Backbone denoiser plus projection head; ``encoder`` is the frozen latent map.

    The backbone need not be the model being optimised; it only has to share
    the latent space (same ``encoder``).
    """

    def __init__(self, backbone: Denoiser, n_d: int = 32, gs: float = 7.5, encoder: Tensor | None = None):
        super().__init__()
        if gs < 1.0:
            raise ValueError("gs must be >= 1")
        cfg = backbone.config
        self.backbone = backbone
        self.head = LrmHead(cfg.n_p, sum(cfg.block_widths) + cfg.mid_width, n_d)
        self.gs = float(gs)
        n = math.prod(cfg.latent_shape)
        self.register_buffer("encoder", torch.eye(n, dtype=DTYPE) if encoder is None else encoder.to(DTYPE))

    def encode(self, image: Tensor) -> Tensor:
        """Fixed linear map from 'image' space to latents (identity by default)."""
        shape = self.backbone.config.latent_shape
        flat = image.reshape(-1, math.prod(shape))
        return (flat @ self.encoder.T).reshape(-1, *shape)

    def forward(self, x_t: Tensor, t, cond) -> Tensor:
        return lrm_score(x_t, t, cond, self)


@dataclass
class PreferencePair:
    x0_win: Tensor
    x0_lose: Tensor
    cond: int


def encode_text(f_eos: Tensor, head: LrmHead) -> Tensor:
    """Project the condition embedding (the prompt's end-of-sequence feature)."""
    return head.text_proj(f_eos)


def vfe(v_mid: Tensor, v_mid_ucond: Tensor, gs: float) -> Tensor:
    if v_mid.shape != v_mid_ucond.shape:
        raise ValueError("conditional and unconditional features differ in shape")
    if gs < 1.0:
        raise ValueError("gs must be >= 1")
    if gs == 1.0:
        return v_mid
    return v_mid + (gs - 1.0) * (v_mid - v_mid_ucond)


def visual_features(x_t: Tensor, t, cond, model: Lrm) -> Tensor:
    """Concatenated ``[V_d1, ..., V_dL, V_enh]`` (order is part of the checkpoint contract)."""
    _, feats = model.backbone(x_t, t, cond)
    if model.gs == 1.0:
        v_enh = feats.v_mid
    else:
        null = torch.full_like(torch.as_tensor(cond, dtype=torch.long).reshape(-1), NULL_CONDITION)
        _, ucond = model.backbone(x_t, t, null)
        v_enh = vfe(feats.v_mid, ucond.v_mid, model.gs)
    return torch.cat([*feats.v_down, v_enh], dim=-1)


def lrm_score(x_t: Tensor, t, cond, model: Lrm) -> Tensor:
    """``tau * <l2(V), l2(T)>`` per batch row."""
    if x_t.dim() == 3:
        x_t = x_t.unsqueeze(0)
    B = x_t.shape[0]
    cond = torch.as_tensor(cond, dtype=torch.long).reshape(-1).expand(B)
    v = model.head.visual_proj(visual_features(x_t, t, cond, model))
    text = encode_text(model.backbone.embed_condition(cond), model.head)
    return model.head.tau * (l2_normalize(v) * l2_normalize(text)).sum(-1)


def bt_loss_from_scores(s_win: Tensor, s_lose: Tensor, target: Tensor | float = 1.0) -> Tensor:
    """Bradley-Terry negative log-likelihood, mean over the batch.

    ``target`` is the probability that the first item wins (1 for hard labels,
    0.5 for ties).
    """
    both = torch.stack([s_win, s_lose], dim=-1)
    lse = torch.logsumexp(both, dim=-1)
    nll_w = lse - s_win
    nll_l = lse - s_lose
    target = torch.as_tensor(target, dtype=DTYPE)
    return (target * nll_w + (1.0 - target) * nll_l).mean()


def bt_loss(
    x0_win: Tensor,
    x0_lose: Tensor,
    cond,
    t,
    eps_w: Tensor,
    eps_l: Tensor,
    model: Lrm,
    schedule: NoiseSchedule,
    target: Tensor | float = 1.0,
) -> Tensor:
    """Noise both images to timestep ``t`` (per row) and score them."""
    B = x0_win.shape[0] if x0_win.dim() == 4 else 1
    x0_win, x0_lose = x0_win.reshape(B, *x0_win.shape[-3:]), x0_lose.reshape(B, *x0_lose.shape[-3:])
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(B)
    cond = torch.as_tensor(cond, dtype=torch.long).reshape(-1).expand(B)
    xw = forward_noise_batch(x0_win, t, eps_w.reshape(x0_win.shape), schedule)
    xl = forward_noise_batch(x0_lose, t, eps_l.reshape(x0_lose.shape), schedule)
    scores = lrm_score(torch.cat([xw, xl]), torch.cat([t, t]), torch.cat([cond, cond]), model)
    return bt_loss_from_scores(scores[:B], scores[B:], target)


def trainable_parameters(model: Lrm) -> list[Tensor]:
    # the encoder is a buffer, so it never shows up here
    return [p for p in model.parameters() if p.requires_grad]


def train_lrm(
    win: Tensor,
    lose: Tensor,
    cond: Tensor,
    model: Lrm,
    schedule: NoiseSchedule,
    steps: int,
    lr: float,
    rng: RngStream,
    batch_size: int = 32,
    targets: Tensor | None = None,
    t_max: int | None = None,
    clip: float | None = 1.0,
) -> tuple[Lrm, list[float]]:
    """Minibatch BT training over backbone and head at ``t ~ U{0, t_max}``.

    ``win``/``lose`` are encoder inputs; they pass through the frozen encoder
    before noising. ``targets`` optionally gives soft labels (0.5 for ties).
    """
    n = win.shape[0]
    if n == 0:
        raise ValueError("no training pairs")
    t_max = schedule.T if t_max is None else t_max
    params = trainable_parameters(model)
    opt = sgd(params, lr)
    guard = DivergenceGuard()
    curve = []
    for step in range(steps):
        r = rng.derive("lrm", step)
        idx = r.integers(0, n, size=min(batch_size, n))
        b = idx.shape[0]
        t = r.integers(0, t_max, size=b)
        eps_w = r.derive("w").normal((b, *win.shape[1:]))
        eps_l = r.derive("l").normal((b, *win.shape[1:]))
        tgt = 1.0 if targets is None else targets[idx]
        loss = bt_loss(model.encode(win[idx]), model.encode(lose[idx]), cond[idx], t, eps_w, eps_l, model, schedule, tgt)
        apply_grads(params, grad(loss, params), opt, clip)
        value = loss.item()
        curve.append(value)
        guard.update(value, step)
    return model, curve


@torch.no_grad()
def score_batched(x: Tensor, t, cond: Tensor, model: Lrm, chunk: int = 256) -> Tensor:
    out = []
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(x.shape[0])
    for i in range(0, x.shape[0], chunk):
        out.append(lrm_score(x[i : i + chunk], t[i : i + chunk], cond[i : i + chunk], model))
    return torch.cat(out)


@torch.no_grad()
def pairwise_accuracy(
    win: Tensor,
    lose: Tensor,
    cond: Tensor,
    t: int,
    model,
    rng: RngStream | None,
    schedule: NoiseSchedule,
    scorer=None,
) -> float:
    """Fraction of pairs with ``S(win) > S(lose)`` after noising to ``t`` (ties count half).

    At ``t == 0`` no noise is added. ``scorer(x, t, cond)`` overrides the
    model, e.g. to check the generating oracle itself.
    """
    if win.shape[0] == 0:
        raise ValueError("no pairs")
    if scorer is None:
        xw, xl = model.encode(win), model.encode(lose)
        scorer = lambda x, tt, c: score_batched(x, tt, c, model)  # noqa: E731
    else:
        xw, xl = win, lose
    if t > 0:
        tt = torch.full((win.shape[0],), t, dtype=torch.long)
        xw = forward_noise_batch(xw, tt, rng.derive("acc-w").normal(xw.shape), schedule)
        xl = forward_noise_batch(xl, tt, rng.derive("acc-l").normal(xl.shape), schedule)
    sw, sl = scorer(xw, t, cond), scorer(xl, t, cond)
    return float(((sw > sl).double() + 0.5 * (sw == sl).double()).mean())
