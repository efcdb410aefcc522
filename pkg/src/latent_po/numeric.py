"""Numeric core: float64 tensors, gradients, seeded streams and small oracles.

Tensors are plain ``torch.Tensor`` objects in float64; parameters are
``torch.nn.Parameter``. Reverse-mode gradients come from torch autograd and
:func:`finite_diff_grad` provides the independent central-difference check.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import DegenerateInputError, NumericFault

DTYPE = torch.float64
NUMERIC_FLOOR = 1e-12
LOG_2PI = math.log(2.0 * math.pi)

Tensor = torch.Tensor
Parameter = torch.nn.Parameter


def tensor(values, shape: Sequence[int] | None = None) -> Tensor:
    """Build a float64 tensor, optionally reshaped."""
    out = torch.as_tensor(values, dtype=DTYPE)
    if shape is not None:
        out = out.reshape(tuple(shape))
    return out


def check_finite(x: Tensor, what: str = "value") -> Tensor:
    if not torch.isfinite(x).all():
        raise NumericFault(f"non-finite {what}")
    return x


def _label_id(label: int | str) -> int:
    if isinstance(label, int):
        return label & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Counter-based random stream keyed by ``(master_seed, stream_id)``.

    Backed by numpy's Philox4x64 generator: the key holds the seed pair and
    the 256-bit counter starts at ``counter``. Identical triples give
    identical draws; distinct stream ids give independent streams.
    """

    def __init__(self, master_seed: int, stream_id: int | str = 0, counter: int = 0):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self.stream_id = _label_id(stream_id)
        self.counter = int(counter)
        bitgen = np.random.Philox(
            key=np.array([self.master_seed, self.stream_id], dtype=np.uint64),
            counter=np.array([self.counter, 0, 0, 0], dtype=np.uint64),
        )
        self._gen = np.random.Generator(bitgen)

    def derive(self, *labels: int | str) -> "RngStream":
        """Child stream whose id is a fixed function of this stream's id and ``labels``."""
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream_id.to_bytes(8, "little"))
        for label in labels:
            h.update(b"/")
            h.update(str(label).encode("utf-8"))
        return RngStream(self.master_seed, int.from_bytes(h.digest(), "little"))

    def normal(self, shape: Sequence[int]) -> Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape)))

    def uniform(self, shape: Sequence[int] = (), low: float = 0.0, high: float = 1.0) -> Tensor:
        return torch.from_numpy(np.asarray(self._gen.uniform(low, high, tuple(shape)), dtype=np.float64))

    def integers(self, low: int, high: int, size: int | Sequence[int] | None = None):
        """Integers in ``[low, high)``; a python int when ``size`` is None."""
        out = self._gen.integers(low, high, size=size)
        return int(out) if size is None else torch.from_numpy(np.asarray(out, dtype=np.int64))

    def permutation(self, n: int) -> Tensor:
        return torch.from_numpy(self._gen.permutation(n).astype(np.int64))

    def torch_seed(self) -> int:
        """A 63-bit seed for torch-side consumers (dropout masks etc.)."""
        return int(self._gen.integers(0, 2**63 - 1))

    def __repr__(self) -> str:
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id}, counter={self.counter})"


def grad(loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Reverse-mode gradient of a scalar ``loss`` w.r.t. each of ``params``.

    Parameters not reachable from ``loss`` get a zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"grad() needs a scalar root, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss.detach()).all():
        raise NumericFault("non-finite loss in forward pass")
    grads = torch.autograd.grad(loss.reshape(()), list(params), allow_unused=True)
    out = []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        check_finite(g, "gradient")
        out.append(g)
    return out


def finite_diff_grad(f: Callable[[], Tensor | float], params: Sequence[Tensor], h: float = 1e-5) -> list[Tensor]:
    """Central-difference gradient of ``f()`` w.r.t. ``params`` (perturbed in place)."""
    if h <= 0:
        raise ValueError("h must be positive")
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(f())
                flat[i] = orig - h
                fm = float(f())
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            out.append(check_finite(g, "finite-difference gradient"))
    return out


def softmax(v: Tensor, dim: int = -1) -> Tensor:
    if v.numel() == 0:
        raise ValueError("softmax of an empty vector")
    shifted = v - v.max(dim=dim, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=dim, keepdim=True)


def l2_normalize(v: Tensor, dim: int = -1) -> Tensor:
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if (norm.detach() <= NUMERIC_FLOOR).any():
        raise DegenerateInputError("cannot normalize a vector with norm below 1e-12")
    return v / norm


def avg_pool_spatial(feature_map: Tensor) -> Tensor:
    """Mean over the trailing two (spatial) axes: ``[..., C, H, W] -> [..., C]``."""
    return feature_map.mean(dim=(-2, -1))


def gaussian_log_prob(x: Tensor, mean: Tensor, std: float | Tensor, batch_dims: int = 0) -> Tensor:
    """Isotropic Gaussian log-density summed over all non-batch axes.

    ``std`` may be a scalar or a tensor broadcastable to the batch shape.
    """
    if x.shape != mean.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(mean.shape)}")
    std_t = torch.as_tensor(std, dtype=DTYPE)
    if (std_t <= 0).any():
        raise ValueError("std must be positive")
    while std_t.dim() < x.dim():
        std_t = std_t.unsqueeze(-1)
    z = (x - mean) / std_t
    elem = -0.5 * z * z - torch.log(std_t) - 0.5 * LOG_2PI
    return elem.sum(dim=tuple(range(batch_dims, x.dim()))) if x.dim() > batch_dims else elem
