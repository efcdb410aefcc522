"""Randomised gradient probes: autograd against central differences.

Each probe builds a tiny randomly perturbed denoiser (or reward model on top of
one), picks one parameter tensor of at most ``MAX_PROBE`` entries at random and
returns the norm-wise relative error between the two gradients of a loss.
"""

import copy

import torch

from latent_po.denoiser import Denoiser, DenoiserConfig, eps_mse_loss
from latent_po.diffusion import build_linear_schedule
from latent_po.lpo import GroupRollout, StepSample, dpo_loss, grpo_advantages, grpo_loss, spo_loss, transition_mean
from latent_po.numeric import RngStream, finite_diff_grad, grad
from latent_po.reward import Lrm, bt_loss, trainable_parameters

SCHED = build_linear_schedule()
TINY = DenoiserConfig(channels=1, height=4, width_px=4, width=4, n_p=4, vocab=3, time_embed_dim=8)
MAX_PROBE = 64
H = 1e-6  # beta = 500 makes the preference losses sharply curved; larger steps are truncation-limited
FLOOR = 1e-8
# transitions with sigma large enough that log-ratios stay moderate
T_PAIRS = ((900, 850), (700, 650), (500, 450), (300, 250))


def _net(rng: RngStream, jitter=0.2) -> Denoiser:
    torch.manual_seed(rng.torch_seed())
    net = Denoiser(TINY)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(jitter * torch.randn_like(p))
    return net


def _nudged(net: Denoiser, scale: float) -> Denoiser:
    out = copy.deepcopy(net)
    with torch.no_grad():
        for p in out.parameters():
            p.add_(scale * torch.randn_like(p))
    return out


def _pick(params, rng: RngStream):
    small = [p for p in params if p.numel() <= MAX_PROBE]
    return small[int(rng.integers(0, len(small), size=1)[0])]


def _transitions(rng: RngStream, n=3):
    idx = rng.derive("t").integers(0, len(T_PAIRS), size=n)
    t = torch.tensor([T_PAIRS[i][0] for i in idx])
    t_prev = torch.tensor([T_PAIRS[i][1] for i in idx])
    cond = torch.as_tensor(rng.derive("c").integers(0, TINY.vocab, size=n))
    return t, t_prev, cond


def _children(ref, parent, t, t_prev, cond, rng, k):
    with torch.no_grad():
        mean, sigma = transition_mean(ref, parent, t, t_prev, cond, 1.0, SCHED)
    view = sigma.reshape(-1, *([1] * (parent.dim() - 1)))
    return [mean + view * rng.derive("child", i).normal(parent.shape) for i in range(k)]


def _build(name: str, rng: RngStream):
    """Returns ``(loss_fn, params)`` for one randomised probe of ``name``."""
    shape = TINY.latent_shape
    if name == "eps_mse_loss":
        net = _net(rng)
        x0 = rng.derive("x0").normal((3, *shape))
        eps = rng.derive("eps").normal((3, *shape))
        t = torch.as_tensor(rng.derive("t").integers(0, 1000, size=3))
        cond = torch.as_tensor(rng.derive("c").integers(0, TINY.vocab, size=3))
        return (lambda: eps_mse_loss(net, x0, cond, t, eps, SCHED)), list(net.parameters())
    if name == "bt_loss":
        model = Lrm(_net(rng), n_d=6, gs=float(rng.derive("gs").uniform((), 1.0, 7.5)))
        win, lose = rng.derive("w").normal((3, *shape)), rng.derive("l").normal((3, *shape))
        ew, el = rng.derive("ew").normal((3, *shape)), rng.derive("el").normal((3, *shape))
        t = torch.as_tensor(rng.derive("t").integers(0, 1000, size=3))
        cond = torch.as_tensor(rng.derive("c").integers(1, TINY.vocab, size=3))
        target = (1.0, 0.5)[int(rng.derive("y").integers(0, 2, size=1)[0])]
        return (lambda: bt_loss(win, lose, cond, t, ew, el, model, SCHED, target)), trainable_parameters(model)
    ref = _net(rng)
    model = _nudged(ref, 1e-3)
    t, t_prev, cond = _transitions(rng)
    parent = rng.derive("parent").normal((3, *shape))
    if name == "spo_loss":
        win, lose = _children(ref, parent, t, t_prev, cond, rng, 2)
        sample = StepSample(parent, win, lose, t, t_prev, cond)
        return (lambda: spo_loss(sample, model, ref, 500.0, 1.0, SCHED)), list(model.parameters())
    if name == "dpo_loss":
        other = rng.derive("other").normal((3, *shape))
        (cw,) = _children(ref, parent, t, t_prev, cond, rng.derive("w"), 1)
        (cl,) = _children(ref, other, t, t_prev, cond, rng.derive("l"), 1)
        fn = lambda: dpo_loss((parent, cw), (other, cl), t, t_prev, cond, model, ref, 500.0, 1.0, SCHED)  # noqa: E731
        return fn, list(model.parameters())
    if name == "grpo_loss":
        K = 4
        old = _nudged(ref, 1e-3)
        cands = torch.stack(_children(old, parent, t, t_prev, cond, rng, K), dim=1)
        rewards = rng.derive("r").normal((3, K))
        with torch.no_grad():
            old_mean, sigma = transition_mean(old, parent, t, t_prev, cond, 1.0, SCHED)
        rollout = GroupRollout(parent, cands, rewards, grpo_advantages(rewards), old_mean, sigma, t, t_prev, cond)
        return (lambda: grpo_loss(rollout, model, ref, 0.1, 0.1, 1.0, SCHED)), list(model.parameters())
    raise ValueError(name)


LOSSES = ("bt_loss", "spo_loss", "dpo_loss", "grpo_loss", "eps_mse_loss")


def probe(name: str, seed: int) -> float:
    rng = RngStream(seed, name)
    fn, params = _build(name, rng)
    p = _pick(params, rng.derive("pick"))
    (analytic,) = grad(fn(), [p])
    (numeric,) = finite_diff_grad(fn, [p], H)
    scale = max(analytic.norm().item(), numeric.norm().item(), FLOOR)
    return (analytic - numeric).norm().item() / scale
