import math

import pytest
import torch

from latent_po.denoiser import Denoiser, DenoiserConfig
from latent_po.diffusion import build_linear_schedule
from latent_po.errors import DegenerateInputError
from latent_po.numeric import DTYPE, RngStream, tensor
from latent_po.reward import (
    TAU_INIT_LOG,
    Lrm,
    bt_loss,
    bt_loss_from_scores,
    encode_text,
    lrm_score,
    pairwise_accuracy,
    train_lrm,
    vfe,
    visual_features,
)
from latent_po.task import make_task, oracle_reward
from oracles import FROZEN

SCHED = build_linear_schedule()
SMALL = DenoiserConfig(channels=1, height=4, width_px=4, width=4, n_p=4, vocab=3, time_embed_dim=8)


def small_lrm(gs=7.5, seed=0):
    torch.manual_seed(seed)
    backbone = Denoiser(SMALL)
    with torch.no_grad():
        for p in backbone.parameters():
            p.add_(0.2 * torch.randn_like(p))
    return Lrm(backbone, n_d=6, gs=gs)


def test_tau_init():
    assert small_lrm().head.tau.item() == pytest.approx(FROZEN["tau_init"], abs=1e-10)
    assert math.exp(TAU_INIT_LOG) == pytest.approx(FROZEN["tau_init"], abs=1e-10)


def test_encode_text_identity_and_zero():
    m = Lrm(Denoiser(SMALL), n_d=SMALL.n_p)
    e = RngStream(0).normal((3, SMALL.n_p))
    with torch.no_grad():
        m.head.text_proj.weight.copy_(torch.eye(SMALL.n_p, dtype=DTYPE))
    assert torch.equal(encode_text(e, m.head), e)
    with torch.no_grad():
        m.head.text_proj.weight.zero_()
    assert torch.equal(encode_text(e, m.head), torch.zeros_like(e))
    with pytest.raises(DegenerateInputError):
        lrm_score(torch.zeros(1, *SMALL.latent_shape, dtype=DTYPE), 10, 1, m)


def test_vfe_examples():
    v = tensor([1.0, 0.0])
    assert torch.equal(vfe(v, tensor([0.0, 1.0]), 1.0), v)
    assert torch.equal(vfe(v, tensor([0.0, 1.0]), 7.5), tensor(FROZEN["vfe"]))
    assert torch.equal(vfe(v, v.clone(), 7.5), v)
    with pytest.raises(ValueError):
        vfe(v, v, 0.5)


def _engineer(m: Lrm, x, t, cond, parallel: bool):
    """Rank-one projections mapping the given features onto chosen unit directions."""
    feats = visual_features(x, t, cond, m)[0].detach()
    emb = m.backbone.embed_condition(torch.tensor([cond]))[0].detach()
    n_d = m.head.visual_proj.weight.shape[0]
    u1 = torch.zeros(n_d, dtype=DTYPE)
    u1[0] = 1.0
    u2 = torch.zeros(n_d, dtype=DTYPE)
    u2[0 if parallel else 1] = 1.0
    with torch.no_grad():
        m.head.visual_proj.weight.copy_(torch.outer(u1, feats))
        m.head.text_proj.weight.copy_(torch.outer(u2, emb))


def test_score_engineered_parallel_and_orthogonal():
    m = small_lrm()
    x = RngStream(1).normal((1, *SMALL.latent_shape))
    _engineer(m, x, 100, 1, parallel=True)
    assert lrm_score(x, 100, 1, m).item() == pytest.approx(FROZEN["tau_init"], abs=1e-9)
    _engineer(m, x, 100, 1, parallel=False)
    assert abs(lrm_score(x, 100, 1, m).item()) < 1e-10


def test_score_invariant_to_visual_rescaling():
    m = small_lrm()
    x = RngStream(2).normal((3, *SMALL.latent_shape))
    a = lrm_score(x, 50, torch.tensor([1, 2, 1]), m)
    with torch.no_grad():
        m.head.visual_proj.weight.mul_(3.0)
    assert torch.allclose(lrm_score(x, 50, torch.tensor([1, 2, 1]), m), a, atol=1e-12)


def test_score_deterministic_and_condition_sensitive():
    m = small_lrm()
    x = RngStream(3).normal((2, *SMALL.latent_shape))
    assert torch.equal(lrm_score(x, 10, 1, m), lrm_score(x, 10, 1, m))
    assert not torch.equal(lrm_score(x, 10, 1, m), lrm_score(x, 10, 2, m))


def test_vfe_disabled_at_gs_one_matches_plain_features():
    m = small_lrm(gs=1.0)
    x = RngStream(4).normal((2, *SMALL.latent_shape))
    _, feats = m.backbone(x, 10, 1)
    assert torch.equal(visual_features(x, 10, 1, m), torch.cat([*feats.v_down, feats.v_mid], -1))


def test_bt_examples():
    assert bt_loss_from_scores(tensor(1.3), tensor(1.3)).item() == pytest.approx(FROZEN["bt_equal"], abs=1e-12)
    loss = bt_loss_from_scores(tensor(math.log(3.0)), tensor(0.0)).item()
    assert loss == pytest.approx(FROZEN["bt_ln3"], abs=1e-12)


def test_bt_swap_complement_and_soft_target():
    rng = RngStream(5)
    for i in range(20):
        sw, sl = rng.derive(i).normal((2,))
        loss = bt_loss_from_scores(sw, sl).item()
        swapped = bt_loss_from_scores(sl, sw).item()
        assert swapped == pytest.approx(-math.log(1.0 - math.exp(-loss)), rel=1e-9)
    tie = bt_loss_from_scores(tensor(2.0), tensor(0.0), 0.5).item()
    ref = 0.5 * (bt_loss_from_scores(tensor(2.0), tensor(0.0)).item() + bt_loss_from_scores(tensor(0.0), tensor(2.0)).item())
    assert tie == pytest.approx(ref, abs=1e-12)


def test_bt_loss_equal_inputs_is_ln2():
    m = small_lrm()
    x = RngStream(6).normal((2, *SMALL.latent_shape))
    eps = RngStream(7).normal(x.shape)
    loss = bt_loss(x, x.clone(), torch.tensor([1, 2]), torch.tensor([100, 300]), eps, eps, m, SCHED)
    assert loss.item() == pytest.approx(FROZEN["bt_equal"], abs=1e-12)


def test_encoder_is_frozen_buffer():
    m = small_lrm()
    names = [n for n, _ in m.named_parameters()]
    assert not any("encoder" in n for n in names)
    assert torch.equal(m.encode(torch.ones(2, *SMALL.latent_shape, dtype=DTYPE)), torch.ones(2, *SMALL.latent_shape, dtype=DTYPE))


def test_train_lrm_deterministic():
    task = make_task(2, SMALL.latent_shape, RngStream(0))
    rng = RngStream(8)
    win = task.patterns[torch.tensor([1, 2] * 8)]
    lose = win + 2.0 * rng.normal(win.shape)
    cond = torch.tensor([1, 2] * 8)
    runs = []
    for _ in range(2):
        m, curve = train_lrm(win, lose, cond, small_lrm(), SCHED, 5, 0.01, RngStream(9), batch_size=4)
        runs.append((curve, pairwise_accuracy(win, lose, cond, 0, m, None, SCHED)))
    assert runs[0] == runs[1]


def test_accuracy_oracle_scorer_and_random_scores():
    task = make_task(4, (4, 8, 8), RngStream(0))
    rng = RngStream(10)
    n = 2000
    cond = rng.derive("c").integers(1, 5, size=n)
    a, b = task.patterns[cond] + rng.derive("a").normal((n, 4, 8, 8)), task.patterns[cond] + 2 * rng.derive("b").normal((n, 4, 8, 8))
    r_a, r_b = oracle_reward(a, cond, task), oracle_reward(b, cond, task)
    win = torch.where((r_a > r_b)[:, None, None, None], a, b)
    lose = torch.where((r_a > r_b)[:, None, None, None], b, a)
    oracle = lambda x, t, c: oracle_reward(x, c, task)  # noqa: E731
    assert pairwise_accuracy(win, lose, cond, 0, None, None, None, scorer=oracle) == 1.0
    noise = RngStream(11)
    rand = lambda x, t, c: noise.normal((x.shape[0],))  # noqa: E731
    acc = pairwise_accuracy(win, lose, cond, 0, None, None, None, scorer=rand)
    assert abs(acc - 0.5) < 3 * math.sqrt(0.25 / n)


def test_accuracy_rejects_empty():
    with pytest.raises(ValueError):
        pairwise_accuracy(torch.zeros(0, 1), torch.zeros(0, 1), torch.zeros(0), 0, None, None, None, scorer=lambda *a: 0)


def test_gs_below_one_rejected():
    with pytest.raises(ValueError):
        Lrm(Denoiser(SMALL), gs=0.9)


def test_noise_awareness_on_separable_task(separable_lrm, separable, schedule):
    _, held = separable
    acc0 = pairwise_accuracy(held.win, held.lose, held.cond, 0, separable_lrm, RngStream(30), schedule)
    acc200 = pairwise_accuracy(held.win, held.lose, held.cond, 200, separable_lrm, RngStream(30), schedule)
    assert acc200 >= acc0 - 0.05

