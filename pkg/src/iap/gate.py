"""Per-layer instance-aware prompt gates.

A gate maps the frozen backbone feature ``f_v`` to two logits ``z = f_v W + b``
(component 0 = ON, component 1 = OFF).  During training a Gumbel-perturbed
softmax is hardened to a one-hot vector with straight-through gradients; at
inference the decision is the noise-free argmax.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import torch

from . import diffcore as dc
from .errors import ArgumentError, ConfigError, DimensionError
from .prompts import _check_weight, add_scaled

ON, OFF = 0, 1
GATE_MODES = ("hard", "soft", "random", "always_on")


@dataclass
class GateConfig:
    mode: str = "hard"
    temperature: float = 3.0
    noise_clamp: float = 1e-6
    init_std: float = 0.02
    init_bias_on: float = 0.0

    def __post_init__(self):
        if self.mode not in GATE_MODES:
            raise ConfigError(f"gate.mode must be one of {GATE_MODES}, got {self.mode!r}")
        if not self.temperature > 0:
            raise ConfigError("gate.temperature must be > 0")
        if not 0 < self.noise_clamp < 0.5:
            raise ConfigError("gate.noise_clamp must lie in (0, 0.5)")


@dataclass
class GateDecision:
    soft: torch.Tensor    # [..., 2] probabilities
    hard: torch.Tensor    # [..., 2] one-hot
    open: torch.Tensor    # [...] bool, hard[ON] == 1
    weight: torch.Tensor  # [...] multiplier applied to the prompt residual


class GateParams:
    """One linear gate ``d_f -> 2`` per vision layer, owned by a single task."""

    def __init__(self, task_id: int, weights: Sequence[torch.Tensor], biases: Sequence[torch.Tensor]):
        self.task_id = task_id
        self.weights = list(weights)
        self.biases = list(biases)

    @classmethod
    def create(cls, task_id: int, depth: int, feature_dim: int, cfg: GateConfig,
               generator: torch.Generator | None = None) -> "GateParams":
        dtype = torch.get_default_dtype()
        ws = [cfg.init_std * torch.randn(feature_dim, 2, generator=generator, dtype=dtype) for _ in range(depth)]
        bs = [torch.tensor([cfg.init_bias_on, 0.0], dtype=dtype) for _ in range(depth)]
        return cls(task_id, ws, bs)

    @property
    def depth(self) -> int:
        return len(self.weights)

    def parameters(self) -> dc.ParameterSet:
        ps = dc.ParameterSet()
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            ps.add(f"gate/{self.task_id}/{i}/W", w)
            ps.add(f"gate/{self.task_id}/{i}/b", b)
        return ps


def gumbel_noise(shape, generator: torch.Generator | None = None, eps: float = 1e-6,
                 dtype: torch.dtype | None = None) -> torch.Tensor:
    """Standard Gumbel samples ``-log(-log U)`` with ``U`` clamped to ``[eps, 1 - eps]``."""
    u = torch.rand(shape, generator=generator, dtype=dtype or torch.get_default_dtype())
    u = u.clamp(eps, 1.0 - eps)
    return -torch.log(-torch.log(u))


def gate_logits(f_v: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    if f_v.shape[-1] != weight.shape[-2]:
        raise DimensionError(f"gate: feature {tuple(f_v.shape)} vs gate weight {tuple(weight.shape)}")
    if weight.dim() == 3:  # per-instance gates [B, d_f, 2]
        return torch.einsum("bf,bfk->bk", f_v, weight) + bias
    return dc.matmul(f_v, weight) + bias


def gate_forward(f_v: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, cfg: GateConfig,
                 generator: torch.Generator | None = None, training: bool = False) -> GateDecision:
    """Gate decision for each row of ``f_v``.

    ``weight``/``bias`` are one layer's ``[d_f, 2]``/``[2]`` parameters, or
    per-instance stacks ``[B, d_f, 2]``/``[B, 2]``.
    """
    z = gate_logits(f_v, weight, bias)
    batch_shape = z.shape[:-1]
    if cfg.mode == "always_on":
        soft = torch.zeros_like(z)
        soft[..., ON] = 1.0
        return GateDecision(soft, soft.clone(), torch.ones(batch_shape, dtype=torch.bool),
                            torch.ones(batch_shape, dtype=z.dtype))
    if cfg.mode == "random":
        coin = torch.rand(batch_shape, generator=generator, dtype=z.dtype) < 0.5
        hard = torch.stack([coin, ~coin], dim=-1).to(z.dtype)
        return GateDecision(torch.full_like(z, 0.5), hard, coin, hard[..., ON])

    if training:
        z = z + gumbel_noise(z.shape, generator, cfg.noise_clamp, dtype=z.dtype)
    soft = dc.softmax(z / cfg.temperature, -1)
    is_open = soft[..., ON] > soft[..., OFF]  # exact tie -> OFF
    hard = torch.stack([is_open, ~is_open], dim=-1).to(z.dtype)
    if cfg.mode == "soft":
        return GateDecision(soft, hard, is_open, soft[..., ON])
    if training:
        # forward value is exactly the hard bit; gradient is that of soft[ON]
        on = hard[..., ON] + (soft[..., ON] - soft[..., ON].detach())
    else:
        on = hard[..., ON]
    return GateDecision(soft, hard, is_open, on)


def gated_residual(o_ori: torch.Tensor, o_r: torch.Tensor, decision: GateDecision, weight=1.0,
                   training: bool = False) -> torch.Tensor:
    """Add the prompt residual scaled by the gate (and, at inference, by ``weight``)."""
    if o_ori.shape != o_r.shape:
        raise DimensionError(f"gated_residual: {tuple(o_ori.shape)} vs {tuple(o_r.shape)}")
    _check_weight(weight)
    m = decision.weight
    if not training:
        m = m * (weight if not isinstance(weight, torch.Tensor) else weight.to(m.dtype))
    return add_scaled(o_ori, o_r, m)


def gate_usage_stats(stream: Iterable[tuple[int, Sequence[bool]]]) -> dict[int, float]:
    """Mean number of open layers per instance, grouped by task.

    ``stream`` yields ``(task_id, per_layer_open_flags)`` for each instance.
    """
    totals: dict[int, list[int]] = defaultdict(lambda: [0, 0])
    for task_id, flags in stream:
        acc = totals[int(task_id)]
        acc[0] += int(sum(bool(f) for f in flags))
        acc[1] += 1
    if not totals:
        raise ArgumentError("gate_usage_stats: empty decision stream")
    return {t: s / n for t, (s, n) in sorted(totals.items())}
