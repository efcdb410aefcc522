"""Step-level preference optimisation in latent space, with DPO and GRPO baselines.

All trainers share one rollout loop: prompts are denoised in a batch with
stochastic DDIM; at every active timestep a group of ``K`` children is drawn
from the shared parent, scored by a frozen reward model at the children's
noise level, and the trajectory continues from a uniformly chosen child.
Log-probabilities are recomputed from the stored parent under current
weights, so losses are pure functions of the stored samples.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from .denoiser import Denoiser, apply_grads, clone_frozen, sgd
from .diffusion import (
    CLEAN,
    NoiseSchedule,
    ddim_mean_batch,
    ddim_step,
    forward_noise_batch,
    inference_timesteps,
    previous_timestep,
    step_coefficients,
)
from .errors import DegenerateInputError
from .numeric import DTYPE, NUMERIC_FLOOR, RngStream, Tensor, gaussian_log_prob, grad, softmax

log = logging.getLogger(__name__)

# log-ratio cap inside the GRPO ratio; keeps exp() finite for 256-dim densities
MAX_LOG_RATIO = 20.0

RewardFn = Callable[[Tensor, int, Tensor], Tensor]  # (latents, timestep, cond) -> scores


@dataclass
class ThresholdPolicy:
    kind: str = "stddev"  # stddev | variance | timestep | constant
    th_min: float = 0.35
    th_max: float = 0.5
    value: float = 0.5

    def __post_init__(self):
        if self.kind not in ("stddev", "variance", "timestep", "constant"):
            raise ValueError(f"unknown threshold kind {self.kind!r}")
        if not self.th_min <= self.th_max:
            raise ValueError("need th_min <= th_max")


@dataclass
class LpoConfig:
    K: int = 4
    beta: float = 500.0
    timestep_lo: int = 0
    timestep_hi: int = 950
    epochs: int = 5
    eta: float = 1.0
    threshold: ThresholdPolicy = field(default_factory=ThresholdPolicy)
    prompts_per_epoch: int = 32
    n_inference_steps: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    grad_clip: float = 1.0
    select_mode: str = "extremes"  # extremes | all

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if not 0 <= self.timestep_lo <= self.timestep_hi:
            raise ValueError("need 0 <= timestep_lo <= timestep_hi")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("step-level sampling needs eta in (0, 1]")
        if self.select_mode not in ("extremes", "all"):
            raise ValueError(f"unknown select_mode {self.select_mode!r}")


@dataclass
class GrpoConfig:
    K: int = 4
    kl_beta: float = 0.1
    clip_eps: float = 0.1
    timestep_lo: int = 0
    timestep_hi: int = 950
    epochs: int = 5
    eta: float = 1.0
    prompts_per_epoch: int = 32
    n_inference_steps: int = 20
    lr: float = 1e-3
    batch_size: int = 16
    inner_iters: int = 2
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must be in (0, 1)")
        if not 0.0 < self.eta <= 1.0:
            raise ValueError("step-level sampling needs eta in (0, 1]")


@dataclass
class DpoConfig:
    beta: float = 500.0
    eta: float = 1.0
    steps: int = 200
    lr: float = 1e-3
    batch_size: int = 16
    n_inference_steps: int = 20
    timestep_lo: int = 0
    timestep_hi: int = 950
    grad_clip: float = 1.0


@dataclass
class StepSample:
    """Batched step-level training triples; every field has a leading sample axis."""

    x_parent: Tensor
    x_win: Tensor
    x_lose: Tensor
    t: Tensor
    t_prev: Tensor
    cond: Tensor

    def __len__(self) -> int:
        return self.x_parent.shape[0]

    def subset(self, idx: Tensor) -> "StepSample":
        return StepSample(*(getattr(self, f)[idx] for f in _SAMPLE_FIELDS))

    @staticmethod
    def concat(parts: Sequence["StepSample"]) -> "StepSample":
        return StepSample(*(torch.cat([getattr(p, f) for p in parts]) for f in _SAMPLE_FIELDS))


_SAMPLE_FIELDS = ("x_parent", "x_win", "x_lose", "t", "t_prev", "cond")


@dataclass
class GroupRollout:
    """Groups of ``K`` children per parent (axis 0: group, axis 1: candidate)."""

    x_parent: Tensor
    candidates: Tensor
    rewards: Tensor
    advantages: Tensor
    old_mean: Tensor
    sigma: Tensor
    t: Tensor
    t_prev: Tensor
    cond: Tensor

    def __len__(self) -> int:
        return self.x_parent.shape[0]

    def subset(self, idx: Tensor) -> "GroupRollout":
        return GroupRollout(*(getattr(self, f)[idx] for f in _ROLLOUT_FIELDS))

    @staticmethod
    def concat(parts: Sequence["GroupRollout"]) -> "GroupRollout":
        return GroupRollout(*(torch.cat([getattr(p, f) for p in parts]) for f in _ROLLOUT_FIELDS))


_ROLLOUT_FIELDS = ("x_parent", "candidates", "rewards", "advantages", "old_mean", "sigma", "t", "t_prev", "cond")


# --- thresholds and pair selection -------------------------------------------------


def active_steps(ts: Sequence[int], t_lo: int, t_hi: int, eta: float, schedule: NoiseSchedule) -> dict[int, float]:
    """``{t: sigma_t}`` for inference steps inside ``[t_lo, t_hi]`` with non-zero sigma."""
    from .diffusion import ddim_sigma

    out = {}
    for i, t in enumerate(ts):
        if t_lo <= t <= t_hi:
            sigma = ddim_sigma(t, previous_timestep(ts, i), eta, schedule)
            if sigma > NUMERIC_FLOOR:
                out[t] = sigma
    return out


def _interp(x: float, lo: float, hi: float, policy: ThresholdPolicy) -> float:
    if hi - lo <= 0:
        raise DegenerateInputError("threshold interpolation range is empty")
    return (x - lo) / (hi - lo) * (policy.th_max - policy.th_min) + policy.th_min


def dynamic_threshold(t: int, policy: ThresholdPolicy, sigmas: dict[int, float], t_lo: int, t_hi: int) -> float:
    """Threshold at ``t`` from the active-step sigma table (see :func:`active_steps`)."""
    if policy.kind == "constant":
        return policy.value
    if policy.kind == "timestep":
        return _interp(t, t_lo, t_hi, policy)
    power = 1 if policy.kind == "stddev" else 2
    values = [s**power for s in sigmas.values()]
    return _interp(sigmas[t] ** power, min(values), max(values), policy)


def pair_gap(scores: Tensor, mode: str = "extremes") -> Tensor:
    """Softmax-normalised gap between the best and worst score along the last axis."""
    if mode == "all":
        p = softmax(scores)
        return p.max(-1).values - p.min(-1).values
    two = torch.stack([scores.max(-1).values, scores.min(-1).values], dim=-1)
    p = softmax(two)
    return p[..., 0] - p[..., 1]


def select_pair(scores: Tensor, th_t: float, mode: str = "extremes") -> tuple[int, int] | None:
    """``(win, lose)`` indices when the normalised gap exceeds ``th_t``.

    Ties among the extremes resolve to the lowest index.
    """
    if scores.numel() < 2:
        raise ValueError("need at least two scores")
    if float(pair_gap(scores, mode)) > th_t:
        return int(torch.argmax(scores)), int(torch.argmin(scores))
    return None


# --- losses -----------------------------------------------------------------------


def step_logprob(x_child: Tensor, mean: Tensor, sigma) -> Tensor:
    sigma_t = torch.as_tensor(sigma, dtype=DTYPE)
    if (sigma_t <= 0).any():
        raise ValueError("step log-probability needs sigma > 0 (eta > 0)")
    batch_dims = 1 if x_child.dim() == 4 else 0
    return gaussian_log_prob(x_child, mean, sigma_t, batch_dims=batch_dims)


def _coeffs(t: Tensor, t_prev: Tensor, eta: float, schedule: NoiseSchedule):
    c_x, c_eps, sig = [], [], []
    for a, b in zip(t.tolist(), t_prev.tolist()):
        cx, ce, s, _ = step_coefficients(a, b, eta, schedule)
        c_x.append(cx)
        c_eps.append(ce)
        sig.append(s)
    as_t = lambda v: torch.as_tensor(v, dtype=DTYPE)  # noqa: E731
    return as_t(c_x), as_t(c_eps), as_t(sig)


def transition_mean(net: Denoiser, x_parent: Tensor, t: Tensor, t_prev: Tensor, cond: Tensor, eta: float, schedule):
    """Per-row DDIM mean and sigma of ``p_net(. | x_parent)``."""
    c_x, c_eps, sigma = _coeffs(t, t_prev, eta, schedule)
    eps, _ = net(x_parent, t, cond)
    return ddim_mean_batch(x_parent, eps, c_x, c_eps), sigma


def preference_logit(lr_win: Tensor, lr_lose: Tensor, beta: float) -> Tensor:
    return beta * (lr_win - lr_lose)


def spo_loss(sample: StepSample, model: Denoiser, ref_model: Denoiser, beta: float, eta: float, schedule) -> Tensor:
    """Shared-parent DPO loss on single transitions, mean over samples."""
    mu, sigma = transition_mean(model, sample.x_parent, sample.t, sample.t_prev, sample.cond, eta, schedule)
    with torch.no_grad():
        mu_ref, _ = transition_mean(ref_model, sample.x_parent, sample.t, sample.t_prev, sample.cond, eta, schedule)
    lr_w = step_logprob(sample.x_win, mu, sigma) - step_logprob(sample.x_win, mu_ref, sigma)
    lr_l = step_logprob(sample.x_lose, mu, sigma) - step_logprob(sample.x_lose, mu_ref, sigma)
    return -F.logsigmoid(preference_logit(lr_w, lr_l, beta)).mean()


def dpo_loss(
    win: tuple[Tensor, Tensor],
    lose: tuple[Tensor, Tensor],
    t: Tensor,
    t_prev: Tensor,
    cond: Tensor,
    model: Denoiser,
    ref_model: Denoiser,
    beta: float,
    eta: float,
    schedule,
) -> Tensor:
    """Diffusion-DPO loss; ``win``/``lose`` are ``(parent, child)`` from separate chains."""
    (pw, cw), (pl, cl) = win, lose
    mu_w, sigma = transition_mean(model, pw, t, t_prev, cond, eta, schedule)
    mu_l, _ = transition_mean(model, pl, t, t_prev, cond, eta, schedule)
    with torch.no_grad():
        ref_w, _ = transition_mean(ref_model, pw, t, t_prev, cond, eta, schedule)
        ref_l, _ = transition_mean(ref_model, pl, t, t_prev, cond, eta, schedule)
    lr_w = step_logprob(cw, mu_w, sigma) - step_logprob(cw, ref_w, sigma)
    lr_l = step_logprob(cl, mu_l, sigma) - step_logprob(cl, ref_l, sigma)
    return -F.logsigmoid(preference_logit(lr_w, lr_l, beta)).mean()


def grpo_advantages(rewards: Tensor) -> Tensor:
    """Group-normalised advantages along the last axis (population std).

    Groups whose std is below 1e-8 get all-zero advantages.
    """
    if rewards.shape[-1] < 2:
        raise ValueError("need at least two rewards per group")
    mean = rewards.mean(-1, keepdim=True)
    std = rewards.std(-1, unbiased=False, keepdim=True)
    degenerate = std < 1e-8
    adv = (rewards - mean) / torch.where(degenerate, torch.ones_like(std), std)
    return torch.where(degenerate, torch.zeros_like(adv), adv)


def clipped_surrogate(ratio: Tensor, advantage: Tensor, clip_eps: float) -> Tensor:
    return torch.minimum(ratio * advantage, ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage)


def gaussian_kl_same_sigma(mu_a: Tensor, mu_b: Tensor, sigma: Tensor) -> Tensor:
    """KL between isotropic Gaussians sharing ``sigma``, per batch row."""
    view = (-1,) + (1,) * (mu_a.dim() - 1)
    return (((mu_a - mu_b) ** 2) / (2.0 * sigma.reshape(view) ** 2)).flatten(1).sum(-1)


def grpo_loss(
    rollout: GroupRollout,
    model: Denoiser,
    ref_model: Denoiser,
    clip_eps: float,
    kl_beta: float,
    eta: float,
    schedule,
) -> Tensor:
    """Negative clipped surrogate plus ``kl_beta`` times the closed-form step KL.

    The rollout-time (old) policy enters through ``rollout.old_mean``.
    """
    G, K = rollout.candidates.shape[:2]
    mu, sigma = transition_mean(model, rollout.x_parent, rollout.t, rollout.t_prev, rollout.cond, eta, schedule)
    with torch.no_grad():
        mu_ref, _ = transition_mean(ref_model, rollout.x_parent, rollout.t, rollout.t_prev, rollout.cond, eta, schedule)
    cand = rollout.candidates.flatten(0, 1)
    rep = lambda v: v.repeat_interleave(K, dim=0)  # noqa: E731
    lp = step_logprob(cand, rep(mu), rep(sigma))
    lp_old = step_logprob(cand, rep(rollout.old_mean), rep(sigma))
    ratio = torch.exp((lp - lp_old).clamp(max=MAX_LOG_RATIO))
    surrogate = clipped_surrogate(ratio, rollout.advantages.flatten(), clip_eps)
    kl = gaussian_kl_same_sigma(mu, mu_ref, sigma)
    return -surrogate.mean() + kl_beta * kl.mean()


# --- rollouts ---------------------------------------------------------------------


def _child_score_timestep(t_prev: int) -> int:
    return 0 if t_prev == CLEAN else t_prev


@torch.no_grad()
def rollout_groups(
    dmo: Denoiser,
    reward_fn: RewardFn,
    cond: Tensor,
    K: int,
    eta: float,
    ts: Sequence[int],
    active: dict[int, float],
    rng: RngStream,
    schedule: NoiseSchedule,
    latent_shape: Sequence[int],
):
    """Denoise a prompt batch; yield per active step ``(t, t_prev, parent, cands, mean, sigma, scores)``.

    Also returns the final latents via the generator's return value.
    """
    B = cond.shape[0]
    x = rng.derive("x_T").normal((B, *latent_shape))
    for i, t in enumerate(ts):
        t_prev = previous_timestep(ts, i)
        eps, _ = dmo(x, t, cond)
        step_rng = rng.derive("step", i)
        if t in active:
            c_x, c_eps, sigma, _ = step_coefficients(t, t_prev, eta, schedule)
            mean = c_x * x + c_eps * eps
            noise = torch.stack([step_rng.derive(k).normal(x.shape) for k in range(K)], dim=1)
            cands = mean[:, None] + sigma * noise  # [B, K, ...]
            scores = reward_fn(cands.flatten(0, 1), _child_score_timestep(t_prev), cond.repeat_interleave(K))
            scores = scores.reshape(B, K)
            yield t, t_prev, x, cands, mean, sigma, scores
            pick = step_rng.derive("pick").integers(0, K, size=B)
            x = cands[torch.arange(B), pick]
        else:
            noise = step_rng.normal(x.shape) if eta > 0 else None
            x, _, _ = ddim_step(x, eps, t, t_prev, eta, noise, schedule)
    return x


def _run_rollouts(gen):
    """Drain a rollout generator, returning (yielded items, final latents)."""
    items = []
    while True:
        try:
            items.append(next(gen))
        except StopIteration as stop:
            return items, stop.value


def _epoch_prompts(prompts: Sequence[int], n: int, rng: RngStream) -> Tensor:
    prompts = torch.as_tensor(list(prompts), dtype=torch.long)
    idx = rng.integers(0, prompts.shape[0], size=n)
    return prompts[idx]


def _train_passes(n: int, batch_size: int, rng: RngStream):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


@dataclass
class TrainResult:
    model: Denoiser
    metrics: list[dict] = field(default_factory=list)


def collect_lpo_samples(
    dmo: Denoiser,
    reward_fn: RewardFn,
    cond: Tensor,
    config: LpoConfig,
    rng: RngStream,
    schedule: NoiseSchedule,
    latent_shape,
    threshold: ThresholdPolicy | None = None,
) -> tuple[StepSample | None, dict[int, int], Tensor]:
    """One rollout pass; returns (samples, qualified counts per timestep, final latents)."""
    threshold = threshold or config.threshold
    ts = inference_timesteps(schedule.T, config.n_inference_steps)
    active = active_steps(ts, config.timestep_lo, config.timestep_hi, config.eta, schedule)
    counts = {t: 0 for t in active}
    parts = []
    gen = rollout_groups(dmo, reward_fn, cond, config.K, config.eta, ts, active, rng, schedule, latent_shape)
    items, final = _run_rollouts(gen)
    for t, t_prev, parent, cands, _, _, scores in items:
        th = dynamic_threshold(t, threshold, active, config.timestep_lo, config.timestep_hi)
        keep = pair_gap(scores, config.select_mode) > th
        if not keep.any():
            continue
        rows = keep.nonzero().flatten()
        win = scores.argmax(-1)[rows]
        lose = scores.argmin(-1)[rows]
        n = rows.shape[0]
        counts[t] += n
        parts.append(
            StepSample(
                x_parent=parent[rows],
                x_win=cands[rows, win],
                x_lose=cands[rows, lose],
                t=torch.full((n,), t, dtype=torch.long),
                t_prev=torch.full((n,), t_prev, dtype=torch.long),
                cond=cond[rows],
            )
        )
    samples = StepSample.concat(parts) if parts else None
    return samples, counts, final


def run_lpo(
    config: LpoConfig,
    dmo: Denoiser,
    reward_fn: RewardFn,
    prompts: Sequence[int],
    rng: RngStream,
    schedule: NoiseSchedule,
    oracle: Callable[[Tensor, Tensor], Tensor] | None = None,
) -> TrainResult:
    """Online step-level preference optimisation of ``dmo`` (updated in place).

    ``reward_fn`` must be frozen for the whole run. ``oracle(x0, cond)``, when
    given, adds the mean ground-truth reward of each epoch's rollouts to the
    metrics.
    """
    ref = clone_frozen(dmo)
    params = [p for p in dmo.parameters() if p.requires_grad]
    opt = sgd(params, config.lr)
    latent_shape = dmo.config.latent_shape
    result = TrainResult(dmo)
    for epoch in range(config.epochs):
        erng = rng.derive("epoch", epoch)
        cond = _epoch_prompts(prompts, config.prompts_per_epoch, erng.derive("prompts"))
        samples, counts, final = collect_lpo_samples(
            dmo, reward_fn, cond, config, erng.derive("rollout"), schedule, latent_shape
        )
        record = {"epoch": epoch, "samples": 0 if samples is None else len(samples)}
        record.update({f"count_t{t}": c for t, c in sorted(counts.items())})
        if oracle is not None:
            record["rollout_reward"] = float(oracle(final, cond).mean())
        if samples is None:
            warnings.warn(f"epoch {epoch}: no qualified samples; skipping update")
            record["loss"] = float("nan")
            result.metrics.append(record)
            continue
        losses = []
        for idx in _train_passes(len(samples), config.batch_size, erng.derive("shuffle")):
            loss = spo_loss(samples.subset(idx), dmo, ref, config.beta, config.eta, schedule)
            apply_grads(params, grad(loss, params), opt, config.grad_clip)
            losses.append(loss.item())
        record["loss"] = sum(losses) / len(losses)
        result.metrics.append(record)
        log.info("lpo epoch %d: %s", epoch, record)
    return result


def collect_grpo_rollouts(dmo, reward_fn, cond, config: GrpoConfig, rng, schedule, latent_shape):
    ts = inference_timesteps(schedule.T, config.n_inference_steps)
    active = active_steps(ts, config.timestep_lo, config.timestep_hi, config.eta, schedule)
    gen = rollout_groups(dmo, reward_fn, cond, config.K, config.eta, ts, active, rng, schedule, latent_shape)
    items, final = _run_rollouts(gen)
    parts = []
    for t, t_prev, parent, cands, mean, sigma, scores in items:
        B = parent.shape[0]
        parts.append(
            GroupRollout(
                x_parent=parent,
                candidates=cands,
                rewards=scores,
                advantages=grpo_advantages(scores),
                old_mean=mean,
                sigma=torch.full((B,), sigma, dtype=DTYPE),
                t=torch.full((B,), t, dtype=torch.long),
                t_prev=torch.full((B,), t_prev, dtype=torch.long),
                cond=cond,
            )
        )
    return (GroupRollout.concat(parts) if parts else None), final


def run_grpo(
    config: GrpoConfig,
    dmo: Denoiser,
    reward_fn: RewardFn,
    prompts: Sequence[int],
    rng: RngStream,
    schedule: NoiseSchedule,
    oracle: Callable[[Tensor, Tensor], Tensor] | None = None,
) -> TrainResult:
    """Step-wise GRPO; the rollout means act as the old-policy snapshot."""
    ref = clone_frozen(dmo)
    params = [p for p in dmo.parameters() if p.requires_grad]
    opt = sgd(params, config.lr)
    result = TrainResult(dmo)
    for epoch in range(config.epochs):
        erng = rng.derive("epoch", epoch)
        cond = _epoch_prompts(prompts, config.prompts_per_epoch, erng.derive("prompts"))
        rollout, final = collect_grpo_rollouts(
            dmo, reward_fn, cond, config, erng.derive("rollout"), schedule, dmo.config.latent_shape
        )
        record = {"epoch": epoch, "groups": 0 if rollout is None else len(rollout)}
        if oracle is not None:
            record["rollout_reward"] = float(oracle(final, cond).mean())
        if rollout is None:
            warnings.warn(f"epoch {epoch}: no active timesteps; skipping update")
            result.metrics.append(record)
            continue
        losses = []
        for it in range(config.inner_iters):
            for idx in _train_passes(len(rollout), config.batch_size, erng.derive("shuffle", it)):
                loss = grpo_loss(rollout.subset(idx), dmo, ref, config.clip_eps, config.kl_beta, config.eta, schedule)
                apply_grads(params, grad(loss, params), opt, config.grad_clip)
                losses.append(loss.item())
        record["loss"] = sum(losses) / len(losses)
        result.metrics.append(record)
        log.info("grpo epoch %d: %s", epoch, record)
    return result


def dpo_transitions(x0: Tensor, t: Tensor, t_prev: Tensor, eta: float, rng: RngStream, schedule):
    """``(parent, child)`` along the forward-noised chain of ``x0``.

    The parent is ``x0`` noised to ``t``; the child is drawn from the DDIM
    posterior that uses the true noise, i.e. the transition an exact model
    would make towards ``x0``.
    """
    eps = rng.derive("eps").normal(x0.shape)
    parent = forward_noise_batch(x0, t, eps, schedule)
    c_x, c_eps, sigma = _coeffs(t, t_prev, eta, schedule)
    mean = ddim_mean_batch(parent, eps, c_x, c_eps)
    child = mean + sigma.reshape(-1, *([1] * (x0.dim() - 1))) * rng.derive("noise").normal(x0.shape)
    return parent, child


def run_dpo(
    config: DpoConfig,
    dmo: Denoiser,
    win: Tensor,
    lose: Tensor,
    cond: Tensor,
    rng: RngStream,
    schedule: NoiseSchedule,
) -> TrainResult:
    """Diffusion-DPO on offline preference pairs at random inference timesteps."""
    ref = clone_frozen(dmo)
    params = [p for p in dmo.parameters() if p.requires_grad]
    opt = sgd(params, config.lr)
    ts = inference_timesteps(schedule.T, config.n_inference_steps)
    active = active_steps(ts, config.timestep_lo, config.timestep_hi, config.eta, schedule)
    if not active:
        raise ValueError("no active timesteps for DPO")
    pos = {t: i for i, t in enumerate(ts)}
    choices = torch.as_tensor(sorted(active), dtype=torch.long)
    result = TrainResult(dmo)
    n = win.shape[0]
    for step in range(config.steps):
        r = rng.derive("dpo", step)
        idx = r.integers(0, n, size=min(config.batch_size, n))
        t = choices[r.integers(0, choices.shape[0], size=idx.shape[0])]
        t_prev = torch.as_tensor([previous_timestep(ts, pos[int(v)]) for v in t], dtype=torch.long)
        w_pair = dpo_transitions(win[idx], t, t_prev, config.eta, r.derive("w"), schedule)
        l_pair = dpo_transitions(lose[idx], t, t_prev, config.eta, r.derive("l"), schedule)
        loss = dpo_loss(w_pair, l_pair, t, t_prev, cond[idx], dmo, ref, config.beta, config.eta, schedule)
        apply_grads(params, grad(loss, params), opt, config.grad_clip)
        result.metrics.append({"step": step, "loss": loss.item()})
    return result
