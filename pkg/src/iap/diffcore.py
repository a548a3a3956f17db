"""Differentiable tensor substrate.

All model code is written against the functional operations in this module.
Tensors are ``torch.Tensor`` objects (``requires_grad`` is the trainable flag);
torch's reverse-mode autograd supplies the gradients.  Every operation below
checks its shape preconditions and raises :class:`~iap.errors.DimensionError`
with both shapes on mismatch.
"""
from __future__ import annotations

import contextlib
import hashlib
import math
from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np
import torch

from .errors import DimensionError, StateError

Tensor = torch.Tensor

LAYERNORM_EPS = 1e-5
_NORM_FLOOR = 1e-24  # squared-norm floor; keeps zero rows at zero with finite grads

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch torch's default dtype (``"float32"`` or ``"float64"``)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(DTYPES[name])
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def tensor(values, trainable: bool = False, dtype: torch.dtype | None = None) -> Tensor:
    t = torch.as_tensor(np.asarray(values), dtype=dtype or torch.get_default_dtype()).clone()
    t.requires_grad_(trainable)
    return t


def _shape(x: Tensor) -> tuple[int, ...]:
    return tuple(x.shape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise DimensionError(f"matmul: inner extents differ, {_shape(a)} x {_shape(b)}")
    return torch.matmul(a, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x - x.max(dim=axis, keepdim=True).values.detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError(
            f"layernorm: feature extent {_shape(x)} vs gain {_shape(gain)} / bias {_shape(bias)}"
        )
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def gelu(x: Tensor) -> Tensor:
    # exact (erf) form
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"add: cannot broadcast {_shape(a)} with {_shape(b)}") from None
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise DimensionError(f"mul: cannot broadcast {_shape(a)} with {_shape(b)}") from None
    return a * b


def scale(x: Tensor, factor: float) -> Tensor:
    return x * factor


def embedding_lookup(table: Tensor, indices: Tensor) -> Tensor:
    indices = torch.as_tensor(indices, dtype=torch.long)
    if indices.numel() and (int(indices.min()) < 0 or int(indices.max()) >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: index range [{int(indices.min())}, {int(indices.max())}] "
            f"outside table of {table.shape[0]} rows"
        )
    return table[indices]


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale rows to unit Euclidean norm; an all-zero row maps to an all-zero row."""
    sq = (x * x).sum(dim=axis, keepdim=True)
    return x / torch.sqrt(sq.clamp_min(_NORM_FLOOR))


def sigmoid(x):
    """Logistic function on floats, numpy arrays or tensors."""
    if isinstance(x, torch.Tensor):
        return torch.sigmoid(x)
    from scipy.special import expit

    out = expit(np.asarray(x, dtype=np.float64))
    return float(out) if out.ndim == 0 else out


class ParameterSet:
    """Ordered, uniquely named collection of trainable tensors."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in (entries or {}).items():
            self.add(name, t)

    def add(self, name: str, t: Tensor) -> None:
        if name in self._entries:
            raise StateError(f"duplicate parameter name {name!r}")
        self._entries[name] = t

    def update(self, other: "ParameterSet") -> None:
        for name, t in other.items():
            self.add(name, t)

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def set_trainable(self, flag: bool) -> None:
        for t in self._entries.values():
            t.requires_grad_(flag)
            if not flag:
                t.grad = None

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def checksum(self) -> str:
        """SHA-256 over names, shapes and little-endian float32 values in order."""
        h = hashlib.sha256()
        for name, t in self._entries.items():
            h.update(name.encode())
            h.update(repr(tuple(t.shape)).encode())
            h.update(t.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()


def sgd_step(params: ParameterSet, lr: float) -> ParameterSet:
    """Plain SGD update ``p <- p - lr * grad`` on every trainable tensor, then clear grads."""
    for name, t in params.items():
        if not t.requires_grad:
            continue
        if t.grad is None:
            raise StateError(f"sgd_step: trainable tensor {name!r} has no gradient")
    with torch.no_grad():
        for _, t in params.items():
            if t.requires_grad:
                if lr != 0.0:
                    t.sub_(lr * t.grad)
                t.grad = None
    return params
