import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from latent_po.errors import UndefinedCorrelationError
from latent_po.mpcf import (
    STRATEGIES,
    GapRecord,
    ScoredPair,
    compute_gaps,
    corr_metrics,
    filter_ties,
    filter_winlose,
    gap_histogram,
    get_strategy,
    pearson,
    score_corpus,
    synthetic_oracles,
)
from latent_po.numeric import RngStream
from latent_po.task import PairCorpusSpec, aesthetic_score, make_task, sample_preference_pairs
from oracles import FROZEN

TASK = make_task(4, (4, 8, 8), RngStream(0))
gap = st.floats(-3, 3, allow_nan=False)


def rec(g_a, g_c, g_v, i=0):
    sp = ScoredPair(i, 1, (g_a, 0.0), (g_c, 0.0), (g_v, 0.0))
    return sp, compute_gaps(sp)


def test_compute_gaps_examples():
    assert compute_gaps(ScoredPair(0, 1, (1.0, 1.0), (2.0, 2.0), (3.0, 3.0))) == GapRecord(0.0, 0.0, 0.0)
    g = compute_gaps(ScoredPair(0, 1, (5.2, 5.5), (0.0, 0.0), (0.0, 0.0)))
    assert g.g_a == pytest.approx(-0.3, abs=1e-12)


@given(gap, gap, gap, gap, gap, gap)
def test_gaps_antisymmetric(a1, a2, c1, c2, v1, v2):
    sp = ScoredPair(0, 1, (a1, a2), (c1, c2), (v1, v2))
    g, s = compute_gaps(sp), compute_gaps(sp.swapped())
    assert (s.g_a, s.g_c, s.g_v) == (-g.g_a, -g.g_c, -g.g_v)


def test_strategy_examples():
    r = [rec(-0.3, 0.1, 0.0)]
    assert filter_winlose(r, "strategy1") == []
    assert filter_winlose(r, "strategy2") == r
    assert filter_winlose(r, 3) == r
    z = [rec(0.0, 0.0, 0.0)]
    assert all(filter_winlose(z, s) == z for s in (1, 2, 3))


@given(st.lists(st.tuples(gap, gap, gap), max_size=40))
def test_strategies_nested(gaps):
    records = [rec(*g, i=i) for i, g in enumerate(gaps)]
    ids = [{sp.index for sp, _ in filter_winlose(records, s)} for s in (1, 2, 3)]
    assert ids[0] <= ids[1] <= ids[2]


def test_tie_examples():
    assert filter_ties([rec(0.1, 0.02, 0.05)]) != []
    assert filter_ties([rec(0.21, 0.0, 0.0)]) == []
    assert filter_ties([rec(0.0, 0.0, 0.0)]) != []
    assert filter_ties([rec(-0.2, -0.03, 0.07)]) != []  # bounds are inclusive


def test_strategy_lookup():
    assert get_strategy(2) is STRATEGIES["strategy2"]
    assert get_strategy("tie").tie
    with pytest.raises(ValueError):
        get_strategy("strategy9")
    with pytest.raises(ValueError):
        filter_winlose([], "tie")


def test_pearson_examples():
    xs = [0.5, 1.0, -2.0, 3.0]
    assert pearson(xs, xs) == pytest.approx(1.0, abs=1e-15)
    assert pearson(xs, [-v for v in xs]) == pytest.approx(-1.0, abs=1e-15)
    assert abs(pearson([1, 2, 3], [1, 2, 4]) - FROZEN["pearson"]) < 1e-5
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        pearson([1], [2])


def test_pearson_matches_numpy():
    import numpy as np

    rng = RngStream(1)
    x, y = rng.normal((50,)).numpy(), rng.normal((50,)).numpy()
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)


@pytest.fixture(scope="module")
def corpus():
    win, lose, cond = sample_preference_pairs(TASK, PairCorpusSpec(200, 2.0), RngStream(2))
    return win, lose, cond, score_corpus(win, lose, cond, TASK)


def test_corr_aes_oracle_is_perfect(corpus):
    win, lose, cond, records = corpus
    aes, _, _ = corr_metrics(lambda x, c: aesthetic_score(x), win, lose, records)
    assert aes == pytest.approx(1.0, abs=1e-12)


def test_corr_random_scores_in_null_band(corpus):
    win, lose, cond, records = corpus
    noise = RngStream(3)
    out = corr_metrics(lambda x, c: noise.normal((x.shape[0],)), win, lose, records)
    assert all(abs(v) <= 0.2 for v in out)


def test_corr_deterministic(corpus):
    win, lose, cond, records = corpus
    f = lambda x, c: aesthetic_score(x) + 0.1 * x.mean(dim=(1, 2, 3))  # noqa: E731
    assert corr_metrics(f, win, lose, records) == corr_metrics(f, win, lose, records)


def test_histogram_examples():
    zeros = [rec(0.0, 0.0, 0.0, i) for i in range(10)]
    counts, below = gap_histogram(zeros, "A", [-1.0, -0.5, 0.5, 1.0])
    assert counts == [0, 10, 0] and below == 0.0
    mixed = [rec(0.0, -0.1 if i < 4 else 0.1, 0.0, i) for i in range(10)]
    counts, below = gap_histogram(mixed, "C", [-1.0, 0.0, 1.0])
    assert below == pytest.approx(0.40) and sum(counts) == 10
    with pytest.raises(ValueError):
        gap_histogram(mixed, "C", [1.0, 0.0])


@given(st.lists(gap, min_size=1, max_size=50))
def test_histogram_counts_sum(values):
    records = [rec(v, 0.0, 0.0, i) for i, v in enumerate(values)]
    counts, _ = gap_histogram(records, "A", [-1.0, 0.0, 1.0])
    assert sum(counts) == len(values)


def test_synthetic_oracles_and_score_corpus_consistent(corpus):
    win, lose, cond, records = corpus
    sp, g = records[7]
    sw = synthetic_oracles(win[7], int(cond[7]), TASK)
    assert sp.s_aes[0] == sw[0] and sp.s_clip[0] == sw[1] and sp.s_vqa[0] == sw[2]
    assert g == compute_gaps(sp)


def test_noise_free_corpus_strategy1_keeps_agreeing_pairs():
    win, lose, cond = sample_preference_pairs(TASK, PairCorpusSpec(300, 2.0, 0.0, 0.0), RngStream(4))
    records = score_corpus(win, lose, cond, TASK)
    agree = [r for r in records if r[1].g_a >= 0 and r[1].g_c >= 0 and r[1].g_v >= 0]
    assert filter_winlose(records, 1) == agree
    assert len(agree) > 0


def test_corr_requires_records():
    with pytest.raises(ValueError):
        corr_metrics(lambda x, c: x, torch.zeros(1), torch.zeros(1), [])
