"""Tiny CLIP-style dual encoder.

A pre-norm transformer over patch tokens (vision) and over label-sentence
tokens (text), each followed by a linear projection into a shared embedding
space.  Every attention layer exposes an injection hook

    hook(q, o_ori) -> o

called with the merged-head query ``q`` and the merged-head attention output
``o_ori`` (both ``[B, L, d]``) before the output projection; ``None`` means
no injection.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
from torch import nn

from . import diffcore as dc
from .errors import ConfigError, DimensionError

Hook = Optional[Callable[[torch.Tensor, torch.Tensor], torch.Tensor]]

PAD, EOS = 0, 1
TEMPLATE = ("a", "photo", "of")
TEMPLATE_IDS = (2, 3, 4)
RESERVED_IDS = 8


@dataclass
class EncoderConfig:
    vision_depth: int = 4
    text_depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: int = 2
    patch_grid: int = 4
    patch_dim: int = 12
    vocab_size: int = 512
    max_text_len: int = 8
    temperature: float = 0.07

    def __post_init__(self):
        for name in ("vision_depth", "text_depth", "width", "heads", "mlp_ratio",
                     "patch_grid", "patch_dim", "max_text_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder.{name} must be positive")
        if self.width % self.heads:
            raise ConfigError("encoder.width must be divisible by encoder.heads")
        if self.vocab_size <= RESERVED_IDS:
            raise ConfigError(f"encoder.vocab_size must exceed {RESERVED_IDS}")
        if self.max_text_len < len(TEMPLATE) + 2:
            raise ConfigError("encoder.max_text_len too short for the label template")
        if not self.temperature > 0:
            raise ConfigError("encoder.temperature must be > 0")

    @property
    def num_patches(self) -> int:
        return self.patch_grid * self.patch_grid


# --------------------------------------------------------------------------- tokenizer

def word_token(word: str, vocab_size: int) -> int:
    return RESERVED_IDS + zlib.crc32(word.encode("utf-8")) % (vocab_size - RESERVED_IDS)


def tokenize(name: str, cfg: EncoderConfig) -> list[int]:
    """``"a photo of <name>"`` -> fixed-length id row ending in EOS, PAD-filled."""
    ids = list(TEMPLATE_IDS) + [word_token(w, cfg.vocab_size) for w in name.split()] + [EOS]
    if len(ids) > cfg.max_text_len:
        raise ConfigError(f"class name {name!r} needs {len(ids)} tokens > max_text_len={cfg.max_text_len}")
    return ids + [PAD] * (cfg.max_text_len - len(ids))


def tokenize_classes(names: Sequence[str], cfg: EncoderConfig) -> torch.Tensor:
    rows = [tokenize(n, cfg) for n in names]
    seen: dict[tuple[int, ...], str] = {}
    for n, r in zip(names, rows):
        key = tuple(r)
        if key in seen and seen[key] != n:
            raise ConfigError(f"token collision between class names {seen[key]!r} and {n!r}")
        seen[key] = n
    return torch.tensor(rows, dtype=torch.long)


# --------------------------------------------------------------------------- layers

class Block(nn.Module):
    """Pre-norm transformer block whose attention output can be hooked."""

    def __init__(self, width: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        d, h = width, width * mlp_ratio
        self.ln1_g = nn.Parameter(torch.ones(d))
        self.ln1_b = nn.Parameter(torch.zeros(d))
        self.qkv_w = nn.Parameter(torch.randn(d, 3 * d) / math.sqrt(d))
        self.qkv_b = nn.Parameter(torch.zeros(3 * d))
        self.out_w = nn.Parameter(torch.randn(d, d) / math.sqrt(d))
        self.out_b = nn.Parameter(torch.zeros(d))
        self.ln2_g = nn.Parameter(torch.ones(d))
        self.ln2_b = nn.Parameter(torch.zeros(d))
        self.fc1_w = nn.Parameter(torch.randn(d, h) / math.sqrt(d))
        self.fc1_b = nn.Parameter(torch.zeros(h))
        self.fc2_w = nn.Parameter(torch.randn(h, d) / math.sqrt(h))
        self.fc2_b = nn.Parameter(torch.zeros(d))

    def split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(1, 2)

    @staticmethod
    def merge(x: torch.Tensor) -> torch.Tensor:
        b, h, n, dh = x.shape
        return x.transpose(1, 2).reshape(b, n, h * dh)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None, hook: Hook = None):
        d = x.shape[-1]
        y = dc.layernorm(x, self.ln1_g, self.ln1_b)
        q, k, v = dc.add(dc.matmul(y, self.qkv_w), self.qkv_b).split(d, dim=-1)
        qh, kh, vh = self.split(q), self.split(k), self.split(v)
        scores = dc.matmul(qh, kh.transpose(-1, -2)) / math.sqrt(d // self.heads)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        o = self.merge(dc.matmul(dc.softmax(scores, -1), vh))
        if hook is not None:
            o = hook(q, o)
        x = x + dc.add(dc.matmul(o, self.out_w), self.out_b)
        y = dc.layernorm(x, self.ln2_g, self.ln2_b)
        y = dc.gelu(dc.add(dc.matmul(y, self.fc1_w), self.fc1_b))
        return x + dc.add(dc.matmul(y, self.fc2_w), self.fc2_b)


def _run_blocks(blocks, x, hooks, key_mask=None):
    if hooks is None:
        hooks = [None] * len(blocks)
    if len(hooks) != len(blocks):
        raise DimensionError(f"expected {len(blocks)} hooks, got {len(hooks)}")
    for block, hook in zip(blocks, hooks):
        x = block(x, key_mask, hook)
    return x


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.width
        self.cfg = cfg
        self.patch_w = nn.Parameter(torch.randn(cfg.patch_dim, d) / math.sqrt(cfg.patch_dim))
        self.patch_b = nn.Parameter(torch.zeros(d))
        self.cls = nn.Parameter(0.02 * torch.randn(d))
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.vision_depth))
        self.ln_g = nn.Parameter(torch.ones(d))
        self.ln_b = nn.Parameter(torch.zeros(d))
        self.proj = nn.Parameter(torch.randn(d, d) / math.sqrt(d))

    def features(self, pixels: torch.Tensor, hooks: Sequence[Hook] | None = None) -> torch.Tensor:
        """Pooled, projected, *unnormalized* image feature ``[B, d]``."""
        cfg = self.cfg
        if pixels.dim() != 3 or tuple(pixels.shape[1:]) != (cfg.num_patches, cfg.patch_dim):
            raise DimensionError(
                f"image batch shape {tuple(pixels.shape)} != [B, {cfg.num_patches}, {cfg.patch_dim}]"
            )
        x = dc.add(dc.matmul(pixels, self.patch_w), self.patch_b)
        cls = self.cls.expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos
        x = _run_blocks(self.blocks, x, hooks)
        return dc.matmul(dc.layernorm(x[:, 0], self.ln_g, self.ln_b), self.proj)


class TextEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.width
        self.cfg = cfg
        self.tok = nn.Parameter(0.02 * torch.randn(cfg.vocab_size, d))
        self.pos = nn.Parameter(0.02 * torch.randn(cfg.max_text_len, d))
        self.blocks = nn.ModuleList(Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_depth))
        self.ln_g = nn.Parameter(torch.ones(d))
        self.ln_b = nn.Parameter(torch.zeros(d))
        self.proj = nn.Parameter(torch.randn(d, d) / math.sqrt(d))

    def features(self, token_ids: torch.Tensor, hooks: Sequence[Hook] | None = None) -> torch.Tensor:
        cfg = self.cfg
        if token_ids.dim() != 2 or token_ids.shape[1] != cfg.max_text_len:
            raise DimensionError(f"text batch shape {tuple(token_ids.shape)} != [M, {cfg.max_text_len}]")
        x = dc.embedding_lookup(self.tok, token_ids) + self.pos
        x = _run_blocks(self.blocks, x, hooks, key_mask=token_ids != PAD)
        eos = (token_ids == EOS).long().argmax(dim=1)
        pooled = x[torch.arange(x.shape[0]), eos]
        return dc.matmul(dc.layernorm(pooled, self.ln_g, self.ln_b), self.proj)


class DualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.vision = ImageEncoder(cfg)
        self.text = TextEncoder(cfg)

    def encode_image(self, pixels, hooks=None) -> torch.Tensor:
        return dc.l2_normalize(self.vision.features(pixels, hooks))

    def encode_text(self, token_ids, hooks=None) -> torch.Tensor:
        return dc.l2_normalize(self.text.features(token_ids, hooks))

    def parameter_set(self, prefix: str = "backbone") -> dc.ParameterSet:
        return dc.ParameterSet({f"{prefix}/{n.replace('.', '/')}": p for n, p in self.named_parameters()})

    def freeze(self) -> None:
        self.parameter_set().set_trainable(False)


# --------------------------------------------------------------------------- objectives

def contrastive_loss(img: torch.Tensor, txt: torch.Tensor, temperature: float) -> torch.Tensor:
    """Image-to-text CLIP objective summed over the batch; row ``i`` of ``txt`` matches image ``i``."""
    if img.shape != txt.shape:
        raise DimensionError(f"contrastive_loss: image {tuple(img.shape)} vs text {tuple(txt.shape)}")
    logits = dc.matmul(dc.l2_normalize(img), dc.l2_normalize(txt).T) / temperature
    return -torch.log_softmax(logits, dim=1).diagonal().sum()


def class_contrastive_loss(img, class_txt, labels, temperature: float) -> torch.Tensor:
    """Same objective with the task's class sentences as the candidate set, averaged over images."""
    if img.shape[-1] != class_txt.shape[-1]:
        raise DimensionError(f"class_contrastive_loss: {tuple(img.shape)} vs {tuple(class_txt.shape)}")
    logits = dc.matmul(dc.l2_normalize(img), dc.l2_normalize(class_txt).T) / temperature
    return nn.functional.cross_entropy(logits, labels)


def cosine_logits(img: torch.Tensor, class_txt: torch.Tensor) -> torch.Tensor:
    if img.shape[-1] != class_txt.shape[-1]:
        raise DimensionError(f"cosine_logits: {tuple(img.shape)} vs {tuple(class_txt.shape)}")
    a, b = dc.l2_normalize(img), dc.l2_normalize(class_txt)
    if a.dim() == 2 and b.dim() == 2:
        return a @ b.T
    return (a.unsqueeze(-2) * b).sum(-1)  # per-instance class sets [B, M, d]


def classify(img: torch.Tensor, class_txt: torch.Tensor) -> torch.Tensor:
    """Index of the most cosine-similar class sentence; ties go to the lowest index."""
    return torch.argmax(cosine_logits(img, class_txt), dim=-1)
