"""Binary checkpoint and dataset formats, and the line-delimited metrics log.

Checkpoint (little-endian)::

    b"LPRF" | version u32 | kind u8 | echo_len u32 | echo utf-8 | n u32
    n x ( name_len u32 | name utf-8 | ndim u32 | dims u32[ndim] | f64[prod(dims)] )
    crc32 u32 over all preceding bytes

Dataset (little-endian)::

    b"LPDS" | version u32 | kind u8 | count u64 | C u32 | H u32 | W u32
    | latents_per_record u32 | score_dims u32
    count x ( cond u32 | f64[latents_per_record * C*H*W] | f64[score_dims] )
"""

from __future__ import annotations

import datetime as _dt
import io
import json
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..errors import FormatError
from ..numeric import DTYPE, Tensor

CKPT_MAGIC = b"LPRF"
CKPT_VERSION = 1
KINDS = {"denoiser": 0, "lrm": 1}
KIND_NAMES = {v: k for k, v in KINDS.items()}

DATA_MAGIC = b"LPDS"
DATA_VERSION = 1
DATA_KINDS = {"latents": 0, "pairs": 1}
DATA_KIND_NAMES = {v: k for k, v in DATA_KINDS.items()}
PAIR_SCORE_FIELDS = ("aes_win", "aes_lose", "clip_win", "clip_lose", "vqa_win", "vqa_lose")


# --- checkpoints ------------------------------------------------------------------


def encode_checkpoint(kind: str, echo: str, tensors: dict[str, Tensor]) -> bytes:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    buf = io.BytesIO()
    echo_b = echo.encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IBI", CKPT_VERSION, KINDS[kind], len(echo_b)))
    buf.write(echo_b)
    buf.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        name_b = name.encode("utf-8")
        arr = np.ascontiguousarray(value.detach().cpu().numpy(), dtype="<f8")
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes) -> tuple[str, str, dict[str, Tensor]]:
    if len(data) < 17 or data[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch (corrupted payload)")
    version, kind, echo_len = struct.unpack_from("<IBI", body, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    if kind not in KIND_NAMES:
        raise FormatError(f"unknown checkpoint kind tag {kind}")
    pos = 13
    echo = body[pos : pos + echo_len].decode("utf-8")
    pos += echo_len
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<I", body, pos)
        pos += 4
        name = body[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<I", body, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        count = math.prod(shape)
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        tensors[name] = torch.from_numpy(arr.astype(np.float64))
    if pos != len(body):
        raise FormatError("trailing bytes in checkpoint")
    return KIND_NAMES[kind], echo, tensors


def save_checkpoint(path: Path, kind: str, echo: str, module: torch.nn.Module) -> None:
    state = {k: v.to(DTYPE) for k, v in module.state_dict().items()}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_checkpoint(kind, echo, state))


def load_checkpoint(path: Path, expect_kind: str | None = None) -> tuple[str, str, dict[str, Tensor]]:
    kind, echo, tensors = decode_checkpoint(Path(path).read_bytes())
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: expected a {expect_kind} checkpoint, found {kind}")
    return kind, echo, tensors


# --- datasets ---------------------------------------------------------------------

_HEADER = struct.Struct("<4sIBQIIIII")


@dataclass
class Dataset:
    kind: str
    cond: Tensor  # [N] long
    latents: Tensor  # [N, latents_per_record, C, H, W]
    scores: Tensor  # [N, score_dims]

    def __len__(self) -> int:
        return self.cond.shape[0]


def encode_dataset(ds: Dataset) -> bytes:
    n, lpr, C, H, W = ds.latents.shape
    sd = ds.scores.shape[1]
    header = _HEADER.pack(DATA_MAGIC, DATA_VERSION, DATA_KINDS[ds.kind], n, C, H, W, lpr, sd)
    rec = np.zeros(n, dtype=np.dtype([("cond", "<u4"), ("lat", "<f8", (lpr * C * H * W,)), ("scores", "<f8", (sd,))]))
    rec["cond"] = ds.cond.numpy()
    rec["lat"] = ds.latents.reshape(n, -1).numpy()
    if sd:
        rec["scores"] = ds.scores.numpy()
    return header + rec.tobytes()


def decode_dataset(data: bytes) -> Dataset:
    if len(data) < _HEADER.size or data[:4] != DATA_MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    _, version, kind, n, C, H, W, lpr, sd = _HEADER.unpack_from(data)
    if version != DATA_VERSION:
        raise FormatError(f"dataset version {version} unsupported (expected {DATA_VERSION})")
    dt = np.dtype([("cond", "<u4"), ("lat", "<f8", (lpr * C * H * W,)), ("scores", "<f8", (sd,))])
    if len(data) != _HEADER.size + n * dt.itemsize:
        raise FormatError("dataset size does not match header")
    rec = np.frombuffer(data, dtype=dt, count=n, offset=_HEADER.size)
    return Dataset(
        kind=DATA_KIND_NAMES[kind],
        cond=torch.from_numpy(rec["cond"].astype(np.int64)),
        latents=torch.from_numpy(rec["lat"].astype(np.float64)).reshape(n, lpr, C, H, W),
        scores=torch.from_numpy(rec["scores"].astype(np.float64)).reshape(n, sd),
    )


def schema_text(ds: Dataset) -> str:
    n, lpr, C, H, W = ds.latents.shape
    lines = [
        "format=LPDS",
        f"version={DATA_VERSION}",
        f"kind={ds.kind}",
        f"records={n}",
        f"latent_shape={C}x{H}x{W}",
        f"latents_per_record={lpr}",
        f"score_dims={ds.scores.shape[1]}",
        "record=cond:u32,latents:f64[latents_per_record*C*H*W],scores:f64[score_dims]",
    ]
    if ds.kind == "pairs":
        lines.append("latents=win,lose")
        lines.append("scores=" + ",".join(PAIR_SCORE_FIELDS))
    return "\n".join(lines) + "\n"


def write_dataset(path: Path, ds: Dataset, overwrite: bool = False) -> None:
    path = Path(path)
    if path.exists() and not overwrite:
        raise FileExistsError(f"refusing to overwrite {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(ds))
    path.with_suffix(path.suffix + ".schema").write_text(schema_text(ds))


def read_dataset(path: Path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


# --- metrics ----------------------------------------------------------------------


class MetricsLog:
    """Append-only JSON-lines log; one record per line, flushed per write."""

    def __init__(self, path: Path, run: str):
        self.path = Path(path)
        self.run = run
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, phase: str, step: int, metrics: dict) -> None:
        record = {
            "run": self.run,
            "phase": phase,
            "step": int(step),
            "metrics": {k: _jsonable(v) for k, v in metrics.items()},
            "time": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _jsonable(v):
    if isinstance(v, (bool, int, str)) or v is None:
        return v
    v = float(v)
    return v if math.isfinite(v) else None


def read_metrics(path: Path) -> list[dict]:
    """Parse complete records; a truncated final line is ignored."""
    out = []
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if not line:
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError:
            if i == len(lines) - 1:
                break
            raise FormatError(f"corrupt metrics record on line {i + 1}") from None
    return out
