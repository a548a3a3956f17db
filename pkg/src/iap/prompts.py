"""Per-task prompt pools and residual prompt attention.

Each task owns one ``(K, V)`` pool per covered layer of each encoder.  The
pool is read by a separate attention over the prompt tokens only; its output
is added to the frozen attention output, so the backbone's own key/value
stream is never touched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import diffcore as dc
from .errors import ArgumentError, ConfigError, DimensionError, StateError

ENCODERS = ("vision", "text")


@dataclass
class PromptConfig:
    length: int = 8
    text_layers: int = 8
    init_std: float = 0.02

    def __post_init__(self):
        if self.length <= 0 or self.text_layers < 0:
            raise ConfigError("prompt.length must be positive and prompt.text_layers non-negative")
        if self.init_std < 0:
            raise ConfigError("prompt.init_std must be non-negative")


@dataclass
class PromptPool:
    keys: torch.Tensor
    values: torch.Tensor
    layer_index: int

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.dim() != 2:
            raise DimensionError(f"pool K {tuple(self.keys.shape)} and V {tuple(self.values.shape)} must be [l, d]")

    @property
    def length(self) -> int:
        return self.keys.shape[0]


def iki_attention(q: torch.Tensor, keys: torch.Tensor, values: torch.Tensor, heads: int = 1) -> torch.Tensor:
    """``softmax(Q K^T / sqrt(d_h)) V`` over prompt tokens, split into ``heads`` heads.

    ``q`` is ``[..., L, d]``; ``keys``/``values`` are ``[l, d]`` or batched ``[B, l, d]``.
    """
    d = q.shape[-1]
    if keys.shape[-1] != d or values.shape != keys.shape:
        raise DimensionError(
            f"iki_attention: query width {tuple(q.shape)} vs K {tuple(keys.shape)} / V {tuple(values.shape)}"
        )
    if d % heads:
        raise DimensionError(f"iki_attention: width {d} not divisible by {heads} heads")
    dh = d // heads

    def split(x):
        return x.reshape(*x.shape[:-1], heads, dh).transpose(-2, -3)

    qh = split(q)
    kh, vh = split(keys), split(values)  # [B, H, l, dh] pools broadcast per instance
    att = dc.softmax(dc.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(dh), -1)
    out = dc.matmul(att, vh)
    return out.transpose(-2, -3).reshape(q.shape)


def _check_weight(weight) -> None:
    w = weight.detach() if isinstance(weight, torch.Tensor) else torch.as_tensor(weight)
    if torch.any(w < 0) or torch.any(w > 1) or torch.any(torch.isnan(w)):
        raise ArgumentError(f"prompt weight must lie in [0, 1], got {w.tolist()}")


def _per_instance(weight, like: torch.Tensor):
    if isinstance(weight, torch.Tensor) and weight.dim() == 1:
        return weight.to(like.dtype).reshape(-1, *([1] * (like.dim() - 1)))
    return weight


def add_scaled(o_ori: torch.Tensor, o_r: torch.Tensor, m) -> torch.Tensor:
    """``o_ori + m * o_r`` where rows with ``m == 0`` return ``o_ori`` bit-exactly.

    A multiplier carrying a gradient (straight-through gate) is never
    short-cut, so closed gates still pass their surrogate gradient.
    """
    m = _per_instance(m, o_ori)
    out = o_ori + m * o_r
    if isinstance(m, torch.Tensor):
        return out if m.requires_grad else torch.where(m == 0, o_ori, out)
    return o_ori if m == 0 else out


def iki_residual(o_ori: torch.Tensor, o_r: torch.Tensor, weight=1.0) -> torch.Tensor:
    """``O_ori + weight * O_r``; ``weight`` is a scalar or a per-instance ``[B]`` tensor in [0, 1]."""
    if o_ori.shape != o_r.shape:
        raise DimensionError(f"iki_residual: {tuple(o_ori.shape)} vs {tuple(o_r.shape)}")
    _check_weight(weight)
    return add_scaled(o_ori, o_r, weight)


def select_pool(scores: Sequence[float]) -> int:
    """Task with the highest confidence; ties go to the lowest task id."""
    if len(scores) == 0:
        raise StateError("select_pool: no seen tasks")
    return int(np.argmax(np.asarray(scores, dtype=np.float64)))


def text_prompt_weight(batch_scores: Sequence[float]) -> float:
    """Batch-wise text prompt weight: mean of sigmoid(E'_b) over the batch."""
    s = np.asarray(batch_scores, dtype=np.float64)
    if s.size == 0:
        raise ArgumentError("text_prompt_weight: empty batch")
    return float(np.mean(dc.sigmoid(s)))


@dataclass
class PromptLibrary:
    """All prompt pools, keyed by ``(task_id, encoder, layer_index)``."""

    width: int
    vision_depth: int
    text_depth: int
    cfg: PromptConfig = field(default_factory=PromptConfig)
    pools: dict = field(default_factory=dict)

    @property
    def vision_layers(self) -> list[int]:
        return list(range(self.vision_depth))

    @property
    def text_layers(self) -> list[int]:
        return list(range(min(self.cfg.text_layers, self.text_depth)))

    def layers(self, encoder: str) -> list[int]:
        return self.vision_layers if encoder == "vision" else self.text_layers

    @property
    def tasks(self) -> list[int]:
        return sorted({t for t, _, _ in self.pools})

    def add_task(self, task_id: int, generator: torch.Generator | None = None) -> dc.ParameterSet:
        """Create zero-value pools for a new task; K ~ N(0, init_std^2)."""
        if task_id in self.tasks:
            raise StateError(f"task {task_id} already has prompt pools")
        dtype = torch.get_default_dtype()
        for enc in ENCODERS:
            for layer in self.layers(enc):
                k = self.cfg.init_std * torch.randn(self.cfg.length, self.width, generator=generator, dtype=dtype)
                v = torch.zeros(self.cfg.length, self.width, dtype=dtype)
                self.pools[(task_id, enc, layer)] = PromptPool(k, v, layer)
        return self.parameters(task_id)

    def pool(self, task_id: int, encoder: str, layer: int) -> PromptPool:
        return self.pools[(task_id, encoder, layer)]

    def parameters(self, task_id: int) -> dc.ParameterSet:
        ps = dc.ParameterSet()
        for enc in ENCODERS:
            for layer in self.layers(enc):
                p = self.pools[(task_id, enc, layer)]
                ps.add(f"prompt/{task_id}/{enc}/{layer}/K", p.keys)
                ps.add(f"prompt/{task_id}/{enc}/{layer}/V", p.values)
        return ps

    def stacked(self, encoder: str, layer: int, tasks: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Keys and values of ``tasks`` at one layer, stacked to ``[T, l, d]``."""
        ks = [self.pools[(t, encoder, layer)].keys for t in tasks]
        vs = [self.pools[(t, encoder, layer)].values for t in tasks]
        return torch.stack(ks), torch.stack(vs)
