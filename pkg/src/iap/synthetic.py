"""Synthetic multi-domain image/label worlds.

A *world* fixes a vocabulary of attribute words and one random patch-space
prototype per word.  A class is a set of words; its archetype image is the sum
of its words' prototypes, so class names and pixels share compositional
structure and a text encoder trained on some word combinations can name
unseen ones.  Each domain applies its own invertible per-patch affine style
map, which moves the domain's images away from the pre-training
distribution and from every other domain.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .encoder import EncoderConfig, tokenize_classes
from .errors import ConfigError

# distinct token ids under the default 512-entry vocabulary
WORDS = (
    "amber", "birch", "coral", "dune", "ember", "fjord", "glade", "heath",
    "iris", "jade", "kelp", "lotus", "moss", "nectar", "pearl", "quartz",
    "reed", "sage", "tide", "umber", "vale", "willow", "yarrow", "aster",
)


@dataclass
class StreamConfig:
    num_domains: int = 4
    classes_per_domain: int = 8
    train_per_class: int = 64
    test_per_class: int = 32
    few_shot: Optional[int] = None
    order: str = "order-1"
    num_words: int = 20
    words_per_class: int = 2
    amplitude: float = 1.0
    noise: float = 0.6
    style_strength: float = 1.0
    style_shift: float = 1.0
    pretrain_domains: int = 6
    pretrain_style_strength: float = 0.35
    pretrain_style_shift: float = 0.35

    def __post_init__(self):
        for name in ("num_domains", "classes_per_domain", "train_per_class", "test_per_class",
                     "num_words", "words_per_class", "pretrain_domains"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"stream.{name} must be positive")
        if self.few_shot is not None and self.few_shot <= 0:
            raise ConfigError("stream.few_shot must be a positive integer or null")
        if self.num_words > len(WORDS):
            raise ConfigError(f"stream.num_words must be <= {len(WORDS)}")
        if self.order not in ("order-1", "order-2"):
            raise ConfigError("stream.order must be 'order-1' or 'order-2'")
        for name in ("amplitude", "noise", "style_strength", "style_shift",
                     "pretrain_style_strength", "pretrain_style_shift"):
            if getattr(self, name) < 0:
                raise ConfigError(f"stream.{name} must be non-negative")


@dataclass
class DomainSpec:
    domain_id: int
    name: str
    class_names: list
    archetypes: np.ndarray        # [M', P, patch_dim]; M' >= M
    noise: float
    style_matrix: np.ndarray      # [patch_dim, patch_dim], invertible
    style_bias: np.ndarray        # [patch_dim]
    train_per_class: int
    test_per_class: int
    few_shot: Optional[int] = None


@dataclass
class DomainData:
    spec: DomainSpec
    train_x: torch.Tensor
    train_y: torch.Tensor
    test_x: torch.Tensor
    test_y: torch.Tensor
    text_tokens: torch.Tensor

    @property
    def num_classes(self) -> int:
        return len(self.spec.class_names)


@dataclass
class TaskStream:
    domains: list                 # DomainSpec in session order
    order: str = "order-1"

    def __len__(self) -> int:
        return len(self.domains)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.domains]


@dataclass
class World:
    words: tuple
    prototypes: np.ndarray        # [num_words, P, patch_dim]
    words_per_class: int
    combos: list = field(default_factory=list)

    def archetype(self, class_name: str) -> np.ndarray:
        idx = [self.words.index(w) for w in class_name.split()]
        return self.prototypes[idx].sum(axis=0)


def make_world(cfg: StreamConfig, enc: EncoderConfig, rng: np.random.Generator) -> World:
    words = WORDS[: cfg.num_words]
    protos = cfg.amplitude * rng.standard_normal((cfg.num_words, enc.num_patches, enc.patch_dim))
    combos = [" ".join(c) for c in itertools.combinations(words, cfg.words_per_class)]
    order = rng.permutation(len(combos))
    return World(words, protos, cfg.words_per_class, [combos[i] for i in order])


def random_style(rng: np.random.Generator, dim: int, strength: float, shift: float):
    """``I + strength * G / sqrt(dim)`` (resampled until well conditioned) and a bias vector."""
    while True:
        a = np.eye(dim) + strength * rng.standard_normal((dim, dim)) / np.sqrt(dim)
        if np.linalg.cond(a) < 50:
            break
    return a, shift * rng.standard_normal(dim)


def make_domain(world: World, domain_id: int, name: str, class_names, cfg: StreamConfig,
                rng: np.random.Generator, strength: float, shift: float,
                few_shot: int | None = None) -> DomainSpec:
    arche = np.stack([world.archetype(c) for c in class_names])
    a, b = random_style(rng, arche.shape[-1], strength, shift)
    return DomainSpec(domain_id, name, list(class_names), arche, cfg.noise, a, b,
                      cfg.train_per_class, cfg.test_per_class, few_shot)


def build_stream(cfg: StreamConfig, enc: EncoderConfig, seed: int,
                 extra_domains: int = 0) -> tuple[World, TaskStream, list, list]:
    """World, ordered MTIL stream, pre-training domains and held-out extra domains.

    Class sets of all MTIL, extra and pre-training domains are pairwise disjoint.
    Each domain draws its style from its own child stream of ``seed``, so
    changing one domain family's settings never perturbs the others.
    """
    world = make_world(cfg, enc, np.random.default_rng([seed, 0]))
    m = cfg.classes_per_domain
    n_task = (cfg.num_domains + extra_domains) * m
    if n_task >= len(world.combos):
        raise ConfigError(
            f"{len(world.combos)} word combinations cannot supply {n_task} task classes plus pre-training classes"
        )
    task_classes = world.combos[:n_task]
    pre_classes = world.combos[n_task:]

    domains = []
    for i in range(cfg.num_domains + extra_domains):
        names = task_classes[i * m:(i + 1) * m]
        domains.append(make_domain(world, i, f"domain{i}", names, cfg, np.random.default_rng([seed, 1, i]),
                                   cfg.style_strength, cfg.style_shift, cfg.few_shot))
    pre = []
    per = int(np.ceil(len(pre_classes) / cfg.pretrain_domains))
    for j in range(cfg.pretrain_domains):
        names = pre_classes[j * per:(j + 1) * per]
        if names:
            pre.append(make_domain(world, -1 - j, f"pretrain{j}", names, cfg, np.random.default_rng([seed, 2, j]),
                                   cfg.pretrain_style_strength, cfg.pretrain_style_shift))
    main, extra = domains[: cfg.num_domains], domains[cfg.num_domains:]
    if cfg.order == "order-2":
        main = main[::-1]
    return world, TaskStream(main, cfg.order), pre, extra


def _sample(spec: DomainSpec, per_class: int, rng: np.random.Generator):
    m = len(spec.class_names)
    y = np.repeat(np.arange(m), per_class)
    x = spec.archetypes[y] + spec.noise * rng.standard_normal((len(y),) + spec.archetypes.shape[1:])
    x = x @ spec.style_matrix + spec.style_bias
    return x, y


def generate_domain(spec: DomainSpec, seed: int, enc: EncoderConfig) -> DomainData:
    """Deterministic train/test split and class-sentence tokens for one domain."""
    m = len(spec.class_names)
    if spec.archetypes.shape[0] < m:
        raise ConfigError(f"domain {spec.name}: {spec.archetypes.shape[0]} archetypes for {m} classes")
    if spec.archetypes.shape[1:] != (enc.num_patches, enc.patch_dim):
        raise ConfigError(f"domain {spec.name}: archetype shape {spec.archetypes.shape[1:]} does not match encoder")
    rng = np.random.default_rng(seed)
    n_train = spec.train_per_class if spec.few_shot is None else min(spec.few_shot, spec.train_per_class)
    tr_x, tr_y = _sample(spec, n_train, rng)
    te_x, te_y = _sample(spec, spec.test_per_class, rng)
    dtype = torch.get_default_dtype()
    return DomainData(
        spec,
        torch.as_tensor(tr_x, dtype=dtype), torch.as_tensor(tr_y, dtype=torch.long),
        torch.as_tensor(te_x, dtype=dtype), torch.as_tensor(te_y, dtype=torch.long),
        tokenize_classes(spec.class_names, enc),
    )
