"""Run configuration: nested dataclasses read from flat ``section.key=value`` text."""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, is_dataclass

from ..denoiser import DenoiserConfig
from ..errors import FormatError
from ..lpo import DpoConfig, GrpoConfig, LpoConfig
from ..mpcf import get_strategy


@dataclass
class RunSection:
    seed: int = 0
    name: str = "run"
    log_every: int = 100


@dataclass
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    n_inference_steps: int = 20


@dataclass
class DataSection:
    n_cond: int = 4
    n_latents: int = 4096
    jitter: float = 0.5
    n_pairs: int = 3000
    n_heldout: int = 500
    roughness_max: float = 2.0
    label_noise: float = 0.1
    min_margin: float = 0.0


@dataclass
class PretrainSection:
    steps: int = 2000
    lr: float = 0.05
    batch_size: int = 64
    cond_dropout: float = 0.1


@dataclass
class LrmSection:
    n_d: int = 32
    gs: float = 7.5
    steps: int = 1000
    lr: float = 0.01
    batch_size: int = 32
    include_ties: bool = False
    log_tau0: float = 2.6592
    # empty: initialise the backbone from the pretrained denoiser (homogeneous)
    backbone: str = ""


@dataclass
class MpcfSection:
    strategy: str = "strategy2"
    hist_bins: int = 20


@dataclass
class EvalSection:
    n_samples: int = 256
    model: str = "ckpt/lpo.lprf"
    baseline: str = "ckpt/denoiser.lprf"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    data: DataSection = field(default_factory=DataSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    lrm: LrmSection = field(default_factory=LrmSection)
    mpcf: MpcfSection = field(default_factory=MpcfSection)
    lpo: LpoConfig = field(default_factory=LpoConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    dpo: DpoConfig = field(default_factory=DpoConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        if self.denoiser.vocab != self.data.n_cond + 1:
            raise ValueError(f"denoiser.vocab must be data.n_cond + 1 = {self.data.n_cond + 1}")
        if self.denoiser.T != self.schedule.T:
            raise ValueError("denoiser.T must equal schedule.T")
        get_strategy(self.mpcf.strategy)
        if self.run.seed < 0 or self.run.seed >= 2**64:
            raise ValueError("run.seed must be a u64")
        for sec in (self.lpo, self.grpo, self.dpo):
            if sec.timestep_hi >= self.schedule.T:
                raise ValueError("optimisation timesteps must lie below schedule.T")


def _parse_scalar(raw: str, typ, key: str):
    try:
        if typ is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError:
        raise FormatError(f"bad value for {key}: {raw!r}") from None
    raise FormatError(f"unsupported type for {key}")


def _to_dict(obj) -> dict:
    return {f.name: (_to_dict(getattr(obj, f.name)) if is_dataclass(getattr(obj, f.name)) else getattr(obj, f.name)) for f in fields(obj)}


def _build(cls, values: dict):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in fields(cls):
        v = values[f.name]
        kwargs[f.name] = _build(hints[f.name], v) if is_dataclass(hints[f.name]) else v
    return cls(**kwargs)


def apply_overrides(config: RunConfig, pairs: typing.Iterable[tuple[str, str]]) -> RunConfig:
    """Return a new config with ``key=value`` overrides applied and validated."""
    values = _to_dict(config)
    for key, raw in pairs:
        parts = key.strip().split(".")
        cls, node = RunConfig, values
        for i, part in enumerate(parts):
            hints = typing.get_type_hints(cls)
            if part not in hints:
                raise FormatError(f"unknown config key {key!r}")
            if i == len(parts) - 1:
                if is_dataclass(hints[part]):
                    raise FormatError(f"config key {key!r} names a section, not a value")
                node[part] = _parse_scalar(raw.strip(), hints[part], key)
            else:
                if not is_dataclass(hints[part]):
                    raise FormatError(f"unknown config key {key!r}")
                cls, node = hints[part], node[part]
    try:
        return _build(RunConfig, values)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid config: {exc}") from exc


def parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def load_config(text: str = "", overrides: typing.Iterable[str] = ()) -> RunConfig:
    pairs = parse_lines(text)
    for item in overrides:
        if "=" not in item:
            raise FormatError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k, v))
    return apply_overrides(RunConfig(), pairs)


def dump_config(config: RunConfig) -> str:
    """Every key, one per line, sorted; ``load_config(dump_config(c)) == c``."""
    lines = []

    def walk(prefix: str, obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if is_dataclass(v):
                walk(key + ".", v)
            elif isinstance(v, float):
                lines.append(f"{key}={v!r}")
            else:
                lines.append(f"{key}={str(v).lower() if isinstance(v, bool) else v}")

    walk("", config)
    return "\n".join(sorted(lines)) + "\n"
