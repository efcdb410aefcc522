"""Command implementations. Each takes a validated config and an output directory.

Layout under the output directory::

    config.txt                 config echo of the latest command
    configs/<command>.txt      config echo of the latest run of each command
    metrics.jsonl              append-only metrics log
    data/*.lpds (+ .schema)    patterns, pretraining latents, train / held-out pairs
    ckpt/*.lprf                denoiser, lrm and fine-tuned checkpoints
    tables/*.tsv               filter histograms, per-timestep counts, plot series
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path

import numpy as np
import torch

from .. import mpcf
from ..denoiser import Denoiser, pretrain_denoiser
from ..diffusion import build_linear_schedule
from ..evaluate import eval_reward, paired_gain
from ..errors import FormatError
from ..lpo import run_dpo, run_grpo, run_lpo
from ..numeric import DTYPE, RngStream, Tensor
from ..reward import Lrm, score_batched, train_lrm
from ..task import PairCorpusSpec, SyntheticTask, make_task, oracle_reward, sample_pretrain_latents, sample_preference_pairs
from .config import RunConfig, dump_config, load_config
from .formats import Dataset, MetricsLog, load_checkpoint, read_dataset, read_metrics, save_checkpoint, write_dataset

log = logging.getLogger(__name__)

PATTERNS = "data/patterns.lpds"
LATENTS = "data/latents.lpds"
PAIRS = "data/pairs.lpds"
HELDOUT = "data/heldout.lpds"
DENOISER = "ckpt/denoiser.lprf"
LRM = "ckpt/lrm.lprf"


class Context:
    """Config, output directory, master rng and metrics sink for one command."""

    def __init__(self, config: RunConfig, out: Path, command: str):
        self.config = config
        self.out = Path(out)
        self.command = command
        self.echo = dump_config(config)
        self.run_id = run_id(config)
        self.rng = RngStream(config.run.seed, command)
        self.schedule = build_linear_schedule(config.schedule.T, config.schedule.beta_start, config.schedule.beta_end)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.txt").write_text(self.echo)
        (self.out / "configs").mkdir(exist_ok=True)
        (self.out / "configs" / f"{command}.txt").write_text(self.echo)
        self.metrics = MetricsLog(self.out / "metrics.jsonl", self.run_id)

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.out / p

    def task(self) -> SyntheticTask:
        return SyntheticTask(read_dataset(self.path(PATTERNS)).latents[:, 0])

    def seed_torch(self, label: str) -> None:
        # module initialisers draw from torch's global generator
        torch.manual_seed(self.rng.derive("init", label).torch_seed())


def run_id(config: RunConfig) -> str:
    digest = hashlib.blake2b(dump_config(config).encode(), digest_size=4).hexdigest()
    return f"{config.run.name}-{config.run.seed}-{digest}"


# --- persistence helpers ----------------------------------------------------------


def pairs_dataset(win: Tensor, lose: Tensor, cond: Tensor, records: list[mpcf.Record]) -> Dataset:
    scores = torch.as_tensor(
        [[*sp.s_aes, *sp.s_clip, *sp.s_vqa] for sp, _ in records], dtype=DTYPE
    ).reshape(len(records), 6)
    return Dataset("pairs", cond, torch.stack([win, lose], dim=1), scores)


def records_from_dataset(ds: Dataset) -> list[mpcf.Record]:
    out = []
    for i in range(len(ds)):
        s = ds.scores[i].tolist()
        sp = mpcf.ScoredPair(i, int(ds.cond[i]), (s[0], s[1]), (s[2], s[3]), (s[4], s[5]))
        out.append((sp, mpcf.compute_gaps(sp)))
    return out


def load_denoiser(path: Path) -> Denoiser:
    _, echo, tensors = load_checkpoint(path, "denoiser")
    net = Denoiser(load_config(echo).denoiser)
    net.load_state_dict(tensors)
    return net


def load_lrm(path: Path) -> Lrm:
    _, echo, tensors = load_checkpoint(path, "lrm")
    cfg = load_config(echo)
    model = Lrm(Denoiser(cfg.denoiser), cfg.lrm.n_d, cfg.lrm.gs)
    model.load_state_dict(tensors)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _log_curve(ctx: Context, phase: str, curve: list[float]) -> None:
    every = max(1, ctx.config.run.log_every)
    for start in range(0, len(curve), every):
        window = curve[start : start + every]
        ctx.metrics.write(phase, start + len(window) - 1, {"loss": sum(window) / len(window)})


def _log_records(ctx: Context, phase: str, records: list[dict]) -> None:
    for i, rec in enumerate(records):
        step = rec.get("epoch", rec.get("step", i))
        ctx.metrics.write(phase, step, {k: v for k, v in rec.items() if k not in ("epoch", "step")})


def write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


# --- commands ---------------------------------------------------------------------


def cmd_gen_data(ctx: Context) -> dict:
    cfg, d = ctx.config, ctx.config.data
    targets = [ctx.path(p) for p in (PATTERNS, LATENTS, PAIRS, HELDOUT)]
    taken = [str(p) for p in targets if p.exists()]
    if taken:
        raise FileExistsError(f"path collision: {', '.join(taken)} already exist")
    task = make_task(d.n_cond, cfg.denoiser.latent_shape, ctx.rng.derive("task"))
    vocab = task.patterns.shape[0]
    write_dataset(
        targets[0],
        Dataset("latents", torch.arange(vocab), task.patterns.unsqueeze(1), torch.zeros(vocab, 0, dtype=DTYPE)),
    )
    x0, cond = sample_pretrain_latents(task, d.n_latents, ctx.rng.derive("latents"), d.jitter)
    write_dataset(targets[1], Dataset("latents", cond, x0.unsqueeze(1), torch.zeros(d.n_latents, 0, dtype=DTYPE)))
    summary = {"latents": d.n_latents}
    for target, label, n in ((targets[2], "pairs", d.n_pairs), (targets[3], "heldout", d.n_heldout)):
        spec = PairCorpusSpec(n, d.roughness_max, 0.0, d.label_noise, d.min_margin)
        win, lose, c = sample_preference_pairs(task, spec, ctx.rng.derive(label))
        write_dataset(target, pairs_dataset(win, lose, c, mpcf.score_corpus(win, lose, c, task)))
        summary[label] = n
    ctx.metrics.write("gen-data", 0, summary)
    return summary


def cmd_pretrain(ctx: Context) -> dict:
    p = ctx.config.pretrain
    ds = read_dataset(ctx.path(LATENTS))
    ctx.seed_torch("denoiser")
    net = Denoiser(ctx.config.denoiser)
    net, curve = pretrain_denoiser(
        ds.latents[:, 0], ds.cond, net, ctx.schedule, p.steps, p.lr, ctx.rng.derive("train"),
        p.batch_size, p.cond_dropout,
    )
    _log_curve(ctx, "pretrain", curve)
    save_checkpoint(ctx.path(DENOISER), "denoiser", ctx.echo, net)
    return {"final_loss": curve[-1] if curve else float("nan")}


def _training_pairs(ctx: Context) -> tuple[Tensor, Tensor, Tensor, Tensor | None]:
    ds = read_dataset(ctx.path(PAIRS))
    records = records_from_dataset(ds)
    kept = mpcf.filter_winlose(records, ctx.config.mpcf.strategy)
    idx = [sp.index for sp, _ in kept]
    targets = None
    if ctx.config.lrm.include_ties:
        ties = [sp.index for sp, _ in mpcf.filter_ties(records) if sp.index not in set(idx)]
        targets = torch.cat([torch.ones(len(idx), dtype=DTYPE), torch.full((len(ties),), 0.5, dtype=DTYPE)])
        idx = idx + ties
    if not idx:
        raise ValueError(f"strategy {ctx.config.mpcf.strategy} keeps no pairs")
    idx = torch.as_tensor(idx, dtype=torch.long)
    return ds.latents[idx, 0], ds.latents[idx, 1], ds.cond[idx], targets


def cmd_train_lrm(ctx: Context) -> dict:
    c = ctx.config.lrm
    win, lose, cond, targets = _training_pairs(ctx)
    backbone = load_denoiser(ctx.path(c.backbone or DENOISER))
    ctx.seed_torch("lrm")
    model = Lrm(backbone, c.n_d, c.gs)
    with torch.no_grad():
        model.head.log_tau.fill_(c.log_tau0)
    model, curve = train_lrm(
        win, lose, cond, model, ctx.schedule, c.steps, c.lr, ctx.rng.derive("train"), c.batch_size, targets
    )
    _log_curve(ctx, "train-lrm", curve)
    save_checkpoint(ctx.path(LRM), "lrm", ctx.echo, model)
    return {"pairs": win.shape[0], "final_loss": curve[-1] if curve else float("nan")}


def cmd_filter(ctx: Context) -> dict:
    strategy = mpcf.get_strategy(ctx.config.mpcf.strategy)
    ds = read_dataset(ctx.path(PAIRS))
    records = records_from_dataset(ds)
    kept = mpcf.filter_ties(records) if strategy.tie else mpcf.filter_winlose(records, strategy)
    idx = torch.as_tensor([sp.index for sp, _ in kept], dtype=torch.long)
    sub = Dataset("pairs", ds.cond[idx], ds.latents[idx], ds.scores[idx])
    write_dataset(ctx.path(f"data/kept_{strategy.name}.lpds"), sub, overwrite=True)
    lo, hi = -2.0, 2.0
    edges = np.linspace(lo, hi, ctx.config.mpcf.hist_bins + 1).tolist()
    rows, below = [], {}
    for dim in mpcf.DIMENSIONS:
        counts, below[dim] = mpcf.gap_histogram(records, dim, edges)
        rows += [[dim, edges[i], edges[i + 1], n] for i, n in enumerate(counts)]
    write_tsv(ctx.path(f"tables/gap_hist_{strategy.name}.tsv"), ["dim", "lo", "hi", "count"], rows)
    summary = {"total": len(records), "kept": len(kept), **{f"frac_below_zero_{d}": v for d, v in below.items()}}
    ctx.metrics.write(f"filter-{strategy.name}", 0, summary)
    return summary


def cmd_corr(ctx: Context) -> dict:
    model = load_lrm(ctx.path(LRM))
    ds = read_dataset(ctx.path(HELDOUT))
    records = records_from_dataset(ds)
    score = lambda x, c: score_batched(model.encode(x), 0, c, model)  # noqa: E731
    aes, clip, vqa = mpcf.corr_metrics(score, ds.latents[:, 0], ds.latents[:, 1], records)
    summary = {"aes_corr": aes, "clip_corr": clip, "vqa_corr": vqa, "gs": model.gs}
    ctx.metrics.write("corr", 0, summary)
    return summary


def _prompts(ctx: Context) -> list[int]:
    return list(range(1, ctx.config.data.n_cond + 1))


def _finetune(ctx: Context, algo: str) -> dict:
    task = ctx.task()
    dmo = load_denoiser(ctx.path(DENOISER))
    oracle = lambda x, c: oracle_reward(x, c, task)  # noqa: E731
    if algo == "dpo":
        ds = read_dataset(ctx.path(PAIRS))
        result = run_dpo(ctx.config.dpo, dmo, ds.latents[:, 0], ds.latents[:, 1], ds.cond, ctx.rng.derive("train"), ctx.schedule)
    else:
        lrm = load_lrm(ctx.path(LRM))
        reward_fn = lambda x, t, c: score_batched(x, t, c, lrm)  # noqa: E731
        runner, cfg = (run_lpo, ctx.config.lpo) if algo == "lpo" else (run_grpo, ctx.config.grpo)
        result = runner(cfg, dmo, reward_fn, _prompts(ctx), ctx.rng.derive("train"), ctx.schedule, oracle)
    _log_records(ctx, algo, result.metrics)
    save_checkpoint(ctx.path(f"ckpt/{algo}.lprf"), "denoiser", ctx.echo, result.model)
    if algo == "lpo":
        counts = [(int(k[len("count_t"):]), m["epoch"], v) for m in result.metrics for k, v in m.items() if k.startswith("count_t")]
        write_tsv(ctx.path("tables/lpo_counts.tsv"), ["t", "epoch", "count"], [list(r) for r in sorted(counts)])
    last = result.metrics[-1] if result.metrics else {}
    return {"loss": last.get("loss", float("nan"))}


def cmd_lpo(ctx: Context) -> dict:
    return _finetune(ctx, "lpo")


def cmd_grpo(ctx: Context) -> dict:
    return _finetune(ctx, "grpo")


def cmd_dpo(ctx: Context) -> dict:
    return _finetune(ctx, "dpo")


def cmd_eval(ctx: Context) -> dict:
    e = ctx.config.eval
    task = ctx.task()
    rng = ctx.rng.derive("samples")
    n_steps = ctx.config.schedule.n_inference_steps
    model = eval_reward(load_denoiser(ctx.path(e.model)), e.n_samples, _prompts(ctx), rng, ctx.schedule, task, n_steps)
    base = eval_reward(load_denoiser(ctx.path(e.baseline)), e.n_samples, _prompts(ctx), rng, ctx.schedule, task, n_steps)
    gain, half = paired_gain(model, base)
    summary = {"reward": model.mean, "baseline_reward": base.mean, "gain": gain, "gain_ci95": half}
    for c, (m, h) in model.per_condition.items():
        summary[f"reward_c{c}"] = m
        summary[f"reward_c{c}_ci95"] = h
    ctx.metrics.write("eval", 0, summary)
    return summary


def cmd_plot_data(ctx: Context) -> dict:
    """One TSV per phase: a ``step`` column plus one column per metric."""
    records = read_metrics(ctx.path("metrics.jsonl"))
    by_phase: dict[str, list[dict]] = {}
    for rec in records:
        by_phase.setdefault(rec["phase"], []).append(rec)
    for phase, recs in by_phase.items():
        keys = sorted({k for r in recs for k in r["metrics"]})
        rows = [[r["run"], r["step"], *[r["metrics"].get(k, "") for k in keys]] for r in recs]
        write_tsv(ctx.path(f"tables/{phase}.tsv"), ["run", "step", *keys], rows)
    return {"phases": len(by_phase)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-lrm": cmd_train_lrm,
    "filter": cmd_filter,
    "corr": cmd_corr,
    "lpo": cmd_lpo,
    "grpo": cmd_grpo,
    "dpo": cmd_dpo,
    "eval": cmd_eval,
    "plot-data": cmd_plot_data,
}


def run_command(command: str, config: RunConfig, out: Path) -> dict:
    if command not in COMMANDS:
        raise FormatError(f"unknown command {command!r}")
    ctx = Context(config, out, command)
    log.info("%s: run %s -> %s", command, ctx.run_id, ctx.out)
    return COMMANDS[command](ctx)
