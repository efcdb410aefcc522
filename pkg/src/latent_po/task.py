"""Synthetic latent world: per-condition target patterns and analytic oracles.

Each real condition id ``1 .. n_cond`` owns a smooth, unit-RMS target pattern;
id 0 is the null prompt. The ground-truth reward of a latent is
``0.5 * aesthetic + 0.5 * alignment`` where aesthetic is negative roughness and
alignment is the cosine to the condition's pattern.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch

from .numeric import DTYPE, RngStream, Tensor

VQA_PERTURBATION = 0.1


@dataclass
class SyntheticTask:
    patterns: Tensor  # [vocab, C, H, W]; row 0 (null) is all zeros

    @property
    def n_cond(self) -> int:
        return self.patterns.shape[0] - 1

    @property
    def latent_shape(self) -> tuple[int, ...]:
        return tuple(self.patterns.shape[1:])


def make_task(n_cond: int, latent_shape: tuple[int, int, int], rng: RngStream, n_freq: int = 3) -> SyntheticTask:
    """Smooth orthonormal-ish target patterns built from low-frequency cosines."""
    C, H, W = latent_shape
    yy = torch.arange(H, dtype=DTYPE)[:, None] / H
    xx = torch.arange(W, dtype=DTYPE)[None, :] / W
    raw = []
    for c in range(n_cond):
        r = rng.derive("pattern", c)
        field = torch.zeros(latent_shape, dtype=DTYPE)
        coef = r.normal((C, n_freq, n_freq))
        phase = r.uniform((C, n_freq, n_freq), 0.0, 2 * math.pi)
        for ch in range(C):
            for ky in range(n_freq):
                for kx in range(n_freq):
                    field[ch] += coef[ch, ky, kx] * torch.cos(
                        math.pi * (ky * yy + kx * xx) + phase[ch, ky, kx]
                    ) / (1.0 + ky + kx)
        raw.append(field.reshape(-1))
    # Gram-Schmidt keeps the patterns smooth (linear mixes) and mutually orthogonal
    basis = []
    for v in raw:
        for b in basis:
            v = v - (v @ b) * b
        basis.append(v / v.norm())
    scale = math.sqrt(C * H * W)
    patterns = torch.zeros((n_cond + 1, C, H, W), dtype=DTYPE)
    for c, b in enumerate(basis):
        patterns[c + 1] = (b * scale).reshape(C, H, W)
    return SyntheticTask(patterns=patterns)


def roughness(x0: Tensor) -> Tensor:
    """Mean absolute difference between spatial neighbours (batched over leading axes)."""
    dy = (x0[..., 1:, :] - x0[..., :-1, :]).abs()
    dx = (x0[..., :, 1:] - x0[..., :, :-1]).abs()
    count = dy.shape[-3:].numel() + dx.shape[-3:].numel()
    return (dy.sum(dim=(-3, -2, -1)) + dx.sum(dim=(-3, -2, -1))) / count


def aesthetic_score(x0: Tensor) -> Tensor:
    return -roughness(x0)


def alignment_score(x0: Tensor, cond: Tensor | int, task: SyntheticTask) -> Tensor:
    target = task.patterns[torch.as_tensor(cond, dtype=torch.long)]
    a = x0.reshape(*x0.shape[:-3], -1)
    b = target.reshape(*target.shape[:-3], -1)
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1)).clamp_min(1e-12)


def _hash_unit(x0: Tensor, cond: int) -> float:
    """Deterministic value in [-1, 1] keyed by the exact bytes of ``x0`` and ``cond``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(x0.detach().cpu().numpy(), dtype="<f8").tobytes())
    h.update(int(cond).to_bytes(4, "little"))
    return int.from_bytes(h.digest(), "little") / (2**64 - 1) * 2.0 - 1.0


def vqa_score(x0: Tensor, cond: int, task: SyntheticTask) -> float:
    return float(alignment_score(x0, cond, task)) + VQA_PERTURBATION * _hash_unit(x0, cond)


def oracle_reward(x0: Tensor, cond: Tensor | int, task: SyntheticTask) -> Tensor:
    """Ground-truth reward used for labels and end-to-end evaluation."""
    return 0.5 * aesthetic_score(x0) + 0.5 * alignment_score(x0, cond, task)


def sample_pretrain_latents(task: SyntheticTask, n: int, rng: RngStream, jitter: float = 0.5) -> tuple[Tensor, Tensor]:
    """``x0 = pattern[c] + jitter * N(0, I)`` with conditions drawn uniformly."""
    cond = rng.derive("cond").integers(1, task.n_cond + 1, size=n)
    noise = rng.derive("jitter").normal((n, *task.latent_shape))
    return task.patterns[cond] + jitter * noise, cond


@dataclass
class PairCorpusSpec:
    n_pairs: int = 2000
    roughness_max: float = 1.0
    mix_min: float = 0.0
    label_noise: float = 0.1
    min_margin: float = 0.0


def sample_candidate(task: SyntheticTask, cond: int, rng: RngStream, spec: PairCorpusSpec) -> Tensor:
    """``a * own pattern + (1 - a) * other pattern + r * N(0, I)``."""
    other = rng.integers(1, task.n_cond, size=None)
    other = other if other < cond else other + 1
    a = float(rng.uniform((), spec.mix_min, 1.0))
    r = float(rng.uniform((), 0.0, spec.roughness_max))
    base = a * task.patterns[cond] + (1.0 - a) * task.patterns[other]
    return base + r * rng.normal(task.latent_shape)


def sample_preference_pairs(task: SyntheticTask, spec: PairCorpusSpec, rng: RngStream):
    """Win/lose pairs labelled by the hidden oracle with ``label_noise`` flips.

    With ``min_margin > 0`` pairs whose oracle gap is below the margin are
    rejected (the separable regime). Returns ``(win, lose, cond)`` tensors.
    """
    wins, loses, conds = [], [], []
    i = 0
    while len(conds) < spec.n_pairs:
        r = rng.derive("pair", i)
        i += 1
        cond = r.integers(1, task.n_cond + 1, size=None)
        a = sample_candidate(task, cond, r.derive("a"), spec)
        b = sample_candidate(task, cond, r.derive("b"), spec)
        gap = float(oracle_reward(a, cond, task) - oracle_reward(b, cond, task))
        if abs(gap) < spec.min_margin or gap == 0.0:
            continue
        a_wins = gap > 0
        if float(r.uniform(())) < spec.label_noise:
            a_wins = not a_wins
        w, l = (a, b) if a_wins else (b, a)
        wins.append(w)
        loses.append(l)
        conds.append(cond)
    return torch.stack(wins), torch.stack(loses), torch.as_tensor(conds, dtype=torch.long)
