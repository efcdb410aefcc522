"""Multi-preference consistent filtering of win/lose pairs, plus correlation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import UndefinedCorrelationError
from .numeric import Tensor
from .task import SyntheticTask, aesthetic_score, alignment_score, vqa_score

DIMENSIONS = ("A", "C", "V")


@dataclass(frozen=True)
class FilterStrategy:
    """Lower bounds on (G_A, G_C, G_V) for win-lose pairs, or absolute bounds for ties."""

    name: str
    bounds: tuple[float, float, float]
    tie: bool = False

    def keeps(self, gap: "GapRecord") -> bool:
        g = (gap.g_a, gap.g_c, gap.g_v)
        if self.tie:
            return all(abs(x) <= b for x, b in zip(g, self.bounds))
        return all(x >= b for x, b in zip(g, self.bounds))


STRATEGIES = {
    "strategy1": FilterStrategy("strategy1", (0.0, 0.0, 0.0)),
    "strategy2": FilterStrategy("strategy2", (-0.5, 0.0, 0.0)),
    "strategy3": FilterStrategy("strategy3", (-1.0, 0.0, 0.0)),
    "tie": FilterStrategy("tie", (0.2, 0.03, 0.07), tie=True),
}


def get_strategy(name: str | int) -> FilterStrategy:
    key = f"strategy{name}" if isinstance(name, int) or str(name).isdigit() else str(name)
    try:
        return STRATEGIES[key]
    except KeyError:
        raise ValueError(f"unknown filter strategy {name!r}") from None


@dataclass
class ScoredPair:
    """Indices into a pair corpus plus per-dimension (win, lose) oracle scores."""

    index: int
    cond: int
    s_aes: tuple[float, float]
    s_clip: tuple[float, float]
    s_vqa: tuple[float, float]

    def swapped(self) -> "ScoredPair":
        flip = lambda s: (s[1], s[0])  # noqa: E731
        return ScoredPair(self.index, self.cond, flip(self.s_aes), flip(self.s_clip), flip(self.s_vqa))


@dataclass(frozen=True)
class GapRecord:
    g_a: float
    g_c: float
    g_v: float

    def get(self, dim: str) -> float:
        return {"A": self.g_a, "C": self.g_c, "V": self.g_v}[dim]


def compute_gaps(sp: ScoredPair) -> GapRecord:
    return GapRecord(
        sp.s_aes[0] - sp.s_aes[1],
        sp.s_clip[0] - sp.s_clip[1],
        sp.s_vqa[0] - sp.s_vqa[1],
    )


Record = tuple[ScoredPair, GapRecord]


def filter_winlose(records: Sequence[Record], strategy: FilterStrategy | str | int) -> list[Record]:
    if not isinstance(strategy, FilterStrategy):
        strategy = get_strategy(strategy)
    if strategy.tie:
        raise ValueError("use filter_ties for the tie rule")
    return [r for r in records if strategy.keeps(r[1])]


def filter_ties(records: Sequence[Record]) -> list[Record]:
    return [r for r in records if STRATEGIES["tie"].keeps(r[1])]


def pearson(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length series of length >= 2")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def corr_metrics(
    score_fn: Callable[[Tensor, Tensor], Tensor],
    win: Tensor,
    lose: Tensor,
    records: Sequence[Record],
) -> tuple[float, float, float]:
    """Pearson of the reward-model gap ``G_L`` against ``G_A``, ``G_C`` and ``G_V``.

    ``score_fn(x, cond)`` scores latents (e.g. an LRM at t = 0, no added
    noise); ``win``/``lose`` are the full corpus and records index into it.
    """
    if not records:
        raise ValueError("no records")
    idx = torch.as_tensor([sp.index for sp, _ in records], dtype=torch.long)
    cond = torch.as_tensor([sp.cond for sp, _ in records], dtype=torch.long)
    g_l = (score_fn(win[idx], cond) - score_fn(lose[idx], cond)).detach().numpy()
    return tuple(pearson(g_l, [g.get(d) for _, g in records]) for d in DIMENSIONS)


def gap_histogram(records: Sequence[Record], dim: str, edges: Sequence[float]) -> tuple[list[int], float]:
    """Counts per bin (values outside the edges go to the end bins) and share of negative gaps.

    Bins are half-open ``[e_i, e_{i+1})`` except the last, which is closed.
    """
    edges = np.asarray(edges, dtype=np.float64)
    if edges.size < 2 or not np.all(np.diff(edges) > 0):
        raise ValueError("edges must be strictly increasing")
    values = np.asarray([g.get(dim) for _, g in records], dtype=np.float64)
    n_bins = edges.size - 1
    bins = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins).tolist()
    below = float((values < 0).mean()) if values.size else 0.0
    return counts, below


def synthetic_oracles(x0: Tensor, cond: int, task: SyntheticTask) -> tuple[float, float, float]:
    """(aesthetic, clip, vqa) stand-in scores for one latent."""
    return (
        float(aesthetic_score(x0)),
        float(alignment_score(x0, cond, task)),
        vqa_score(x0, cond, task),
    )


def score_corpus(win: Tensor, lose: Tensor, cond: Tensor, task: SyntheticTask) -> list[Record]:
    records = []
    for i in range(win.shape[0]):
        c = int(cond[i])
        sw = synthetic_oracles(win[i], c, task)
        sl = synthetic_oracles(lose[i], c, task)
        sp = ScoredPair(i, c, (sw[0], sl[0]), (sw[1], sl[1]), (sw[2], sl[2]))
        records.append((sp, compute_gaps(sp)))
    return records
