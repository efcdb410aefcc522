"""Session fixtures for the synthetic task: one pretrained denoiser and the reward models built on it.

Seeds and budgets here are the fixed-seed fixtures the acceptance checks refer to.
"""

import copy
import time
from dataclasses import dataclass

import pytest
import torch

from latent_po.denoiser import Denoiser, DenoiserConfig, pretrain_denoiser
from latent_po.diffusion import build_linear_schedule
from latent_po.mpcf import filter_winlose, score_corpus
from latent_po.numeric import RngStream
from latent_po.reward import Lrm, score_batched, train_lrm
from latent_po.task import PairCorpusSpec, make_task, sample_pretrain_latents, sample_preference_pairs

PRETRAIN_STEPS = 2000
LRM_STEPS = 1000


@dataclass
class Corpus:
    win: torch.Tensor
    lose: torch.Tensor
    cond: torch.Tensor


@pytest.fixture(scope="session")
def schedule():
    return build_linear_schedule()


@pytest.fixture(scope="session")
def task():
    return make_task(4, (4, 8, 8), RngStream(0))


@pytest.fixture(scope="session")
def pretrained(task, schedule):
    x, c = sample_pretrain_latents(task, 4096, RngStream(1))
    torch.manual_seed(0)
    net = Denoiser(DenoiserConfig())
    start = time.perf_counter()
    net, curve = pretrain_denoiser(x, c, net, schedule, PRETRAIN_STEPS, 0.05, RngStream(3))
    net.pretrain_seconds = time.perf_counter() - start
    net.curve = curve
    return net


def _corpus(task, spec, seed):
    return Corpus(*sample_preference_pairs(task, spec, RngStream(seed)))


@pytest.fixture(scope="session")
def separable(task):
    """Noise-free pairs whose hidden-oracle gap is at least 1."""
    spec = PairCorpusSpec(n_pairs=1000, roughness_max=2.0, label_noise=0.0, min_margin=1.0)
    held = PairCorpusSpec(n_pairs=500, roughness_max=2.0, label_noise=0.0, min_margin=1.0)
    return _corpus(task, spec, 20), _corpus(task, held, 21)


def fresh_lrm(pretrained, gs, seed=0):
    torch.manual_seed(seed)
    return Lrm(copy.deepcopy(pretrained), gs=gs)


@pytest.fixture(scope="session")
def separable_lrm(pretrained, separable, schedule):
    train, _ = separable
    model = fresh_lrm(pretrained, 7.5)
    start = time.perf_counter()
    model, curve = train_lrm(train.win, train.lose, train.cond, model, schedule, LRM_STEPS, 0.01, RngStream(22))
    model.train_seconds = time.perf_counter() - start
    return model


@pytest.fixture(scope="session")
def preference_corpus(task):
    """Noisy scored corpus (3000 train, 500 held out) and its strategy-2 subset."""
    train = _corpus(task, PairCorpusSpec(n_pairs=3000, roughness_max=2.0), 5)
    held = _corpus(task, PairCorpusSpec(n_pairs=500, roughness_max=2.0), 6)
    kept = filter_winlose(score_corpus(train.win, train.lose, train.cond, task), "strategy2")
    idx = torch.as_tensor([sp.index for sp, _ in kept])
    return Corpus(train.win[idx], train.lose[idx], train.cond[idx]), held


@pytest.fixture(scope="session")
def vfe_lrms(pretrained, preference_corpus, schedule):
    """Identically seeded LRMs trained on the strategy-2 corpus with gs = 1 and gs = 7.5."""
    kept, _ = preference_corpus
    out = {}
    for gs in (1.0, 7.5):
        model = fresh_lrm(pretrained, gs)
        start = time.perf_counter()
        model, _ = train_lrm(kept.win, kept.lose, kept.cond, model, schedule, LRM_STEPS, 0.01, RngStream(7))
        model.train_seconds = time.perf_counter() - start
        for p in model.parameters():
            p.requires_grad_(False)
        out[gs] = model
    return out


@pytest.fixture(scope="session")
def reward_fn(vfe_lrms):
    lrm = vfe_lrms[7.5]
    return lambda x, t, c: score_batched(x, t, c, lrm)
