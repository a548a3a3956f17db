"""Multi-domain task-incremental protocol on top of the frozen dual encoder.

Sessions run strictly in stream order.  Session ``t`` creates task ``t``'s
prompt pools and gates, trains only those, then fits the task- and
class-level Gaussians from frozen features of its training split.  After
every session all tasks (seen and unseen) are evaluated without task
identity; the resulting session-by-task accuracy matrix yields the
Transfer / Average / Last metrics.
"""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from pathlib import Path
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from . import diffcore as dc
from .config import OptimConfig, PretrainConfig, RunConfig, to_dict
from .encoder import DualEncoder, class_contrastive_loss, classify, cosine_logits
from .errors import StateError
from .gate import GateConfig, GateParams, gate_forward, gate_usage_stats, gated_residual
from .prompts import PromptConfig, PromptLibrary, iki_attention, iki_residual, text_prompt_weight
from .router import (
    ClassDistribution, DistributionLibrary, RoutingConfig, RoutingDecision, TaskDistribution,
    distribution_from_moments, fit_class_stats, fit_task_stats, route_batch,
)
from .synthetic import DomainData, build_stream, generate_domain

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- seeding

def derive_seed(master: int, *labels) -> int:
    """Child seed for the stream named by ``labels``.

    Rule: ``SeedSequence(master, spawn_key=(crc32(str(label)) for label in labels))``,
    first 64-bit word of its state, reduced mod 2**63.
    """
    key = tuple(zlib.crc32(str(label).encode("utf-8")) for label in labels)
    state = np.random.SeedSequence(master, spawn_key=key).generate_state(1, dtype=np.uint64)[0]
    return int(state % (1 << 63))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def build_encoder(cfg: RunConfig) -> DualEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(cfg.seed, "backbone-init"))
        return DualEncoder(cfg.encoder)


# --------------------------------------------------------------------------- pre-training

def pretrain_backbone(encoder: DualEncoder, domains: Sequence[DomainData], cfg: PretrainConfig,
                      seed: int) -> list[float]:
    """Contrastive pre-training of the whole dual encoder on the pre-training pool."""
    xs = torch.cat([d.train_x for d in domains])
    offsets = np.cumsum([0] + [d.num_classes for d in domains])
    ys = torch.cat([d.train_y + int(o) for d, o in zip(domains, offsets)])
    tokens = torch.cat([d.text_tokens for d in domains])
    params = list(encoder.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=0.01)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=max(cfg.steps, 1),
                                                pct_start=0.1)
    gen = torch_generator(seed)
    losses = []
    for step in range(cfg.steps):
        idx = torch.randint(0, xs.shape[0], (cfg.batch_size,), generator=gen)
        img = encoder.encode_image(xs[idx])
        txt = encoder.encode_text(tokens)
        loss = class_contrastive_loss(img, txt, ys[idx], encoder.cfg.temperature)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(float(loss.detach()))
        if step % 200 == 0:
            log.info("pretrain step %d loss %.4f", step, losses[-1])
    encoder.freeze()
    return losses


def backbone_key(cfg: RunConfig) -> str:
    """Digest of every setting that influences the pre-trained backbone."""
    d = to_dict(cfg)
    stream = {k: v for k, v in d["stream"].items() if k not in ("order", "few_shot", "style_strength", "style_shift")}
    pre = {k: v for k, v in d["pretrain"].items() if k != "cache_dir"}
    blob = json.dumps({"encoder": d["encoder"], "stream": stream, "pretrain": pre, "seed": cfg.seed},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_backbone(encoder: DualEncoder, tensors: dict) -> None:
    params = encoder.parameter_set()
    missing = sorted(set(params.names()) - set(tensors))
    if missing:
        raise StateError(f"backbone archive lacks {len(missing)} tensor(s), e.g. {missing[0]}")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.as_tensor(tensors[name], dtype=p.dtype))
    encoder.freeze()


def obtain_backbone(cfg: RunConfig, pre: Sequence[DomainData],
                    say: Callable[[str], None] = log.info) -> DualEncoder:
    """Pre-trained frozen encoder, read from ``pretrain.cache_dir`` when a matching archive exists."""
    encoder = build_encoder(cfg)
    path = None
    if cfg.pretrain.cache_dir:
        path = Path(cfg.pretrain.cache_dir) / f"backbone-{backbone_key(cfg)}.iap"
        if path.is_file():
            say(f"loading cached backbone {path}")
            load_backbone(encoder, ckpt.load(path)[0])
            return encoder
    say(f"pre-training backbone for {cfg.pretrain.steps} steps")
    pretrain_backbone(encoder, pre, cfg.pretrain, derive_seed(cfg.seed, "pretrain"))
    # round through float32 so fresh and cached runs see identical weights
    load_backbone(encoder, {n: ckpt.as_float32(p) for n, p in encoder.parameter_set().items()})
    if path is not None:
        ckpt.save(path, dict(encoder.parameter_set().items()), {"key": backbone_key(cfg)})
    return encoder


# --------------------------------------------------------------------------- model

@dataclass
class Prediction:
    labels: torch.Tensor
    open_layers: np.ndarray                        # [B, vision_depth] bool
    decisions: Optional[list] = None               # RoutingDecision per instance


class IAPModel:
    """Frozen dual encoder plus per-task prompt pools, gates and feature Gaussians."""

    def __init__(self, encoder: DualEncoder, prompt: PromptConfig, gate: GateConfig,
                 routing: RoutingConfig):
        self.encoder = encoder
        self.gate_cfg = gate
        self.routing = routing
        ec = encoder.cfg
        self.library = PromptLibrary(ec.width, ec.vision_depth, ec.text_depth, prompt)
        self.gates: dict[int, GateParams] = {}
        self.dists = DistributionLibrary()

    @property
    def heads(self) -> int:
        return self.encoder.cfg.heads

    @property
    def tasks(self) -> list[int]:
        return sorted(self.gates)

    def frozen_features(self, pixels: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.encoder.vision.features(pixels)

    def task_parameters(self, task_id: int) -> dc.ParameterSet:
        ps = self.library.parameters(task_id)
        ps.update(self.gates[task_id].parameters())
        return ps

    # hooks ---------------------------------------------------------------

    def _hook(self, keys, values, decision, weight, training):
        heads = self.heads
        return lambda q, o: gated_residual(o, iki_attention(q, keys, values, heads), decision, weight, training)

    def vision_hooks(self, f_v: torch.Tensor, task_index: torch.Tensor, weight, training: bool,
                     generator: torch.Generator | None = None, tasks: Sequence[int] | None = None):
        """Per-layer hooks for a batch whose instance ``b`` uses task ``tasks[task_index[b]]``."""
        tasks = self.tasks if tasks is None else list(tasks)
        hooks, opens = [], []
        for layer in self.library.vision_layers:
            if len(tasks) == 1:
                pool = self.library.pool(tasks[0], "vision", layer)
                keys, values = pool.keys, pool.values
                w, b = self.gates[tasks[0]].weights[layer], self.gates[tasks[0]].biases[layer]
            else:
                k, v = self.library.stacked("vision", layer, tasks)
                keys, values = k[task_index], v[task_index]
                w = torch.stack([self.gates[t].weights[layer] for t in tasks])[task_index]
                b = torch.stack([self.gates[t].biases[layer] for t in tasks])[task_index]
            decision = gate_forward(f_v, w, b, self.gate_cfg, generator, training)
            opens.append(decision.open)
            hooks.append(self._hook(keys, values, decision, weight, training))
        return hooks, torch.stack(opens, dim=-1)

    def text_hooks(self, task_id: int, weight: float):
        heads = self.heads
        hooks = []
        for layer in range(self.encoder.cfg.text_depth):
            if layer in self.library.text_layers:
                pool = self.library.pool(task_id, "text", layer)
                hooks.append(lambda q, o, p=pool: iki_residual(o, iki_attention(q, p.keys, p.values, heads), weight))
            else:
                hooks.append(None)
        return hooks

    # training --------------------------------------------------------------

    def training_loss(self, pixels, labels, tokens, task_id: int, generator=None):
        f_v = self.frozen_features(pixels)
        hooks, opens = self.vision_hooks(f_v, None, 1.0, True, generator, tasks=[task_id])
        img = self.encoder.encode_image(pixels, hooks)
        txt = self.encoder.encode_text(tokens, self.text_hooks(task_id, 1.0))
        return class_contrastive_loss(img, txt, labels, self.encoder.cfg.temperature), opens

    # inference ---------------------------------------------------------------

    @torch.no_grad()
    def predict(self, pixels: torch.Tensor, tokens: torch.Tensor,
                generator: torch.Generator | None = None) -> Prediction:
        f_v = self.encoder.vision.features(pixels)
        base_img = dc.l2_normalize(f_v)
        base_txt = self.encoder.encode_text(tokens)
        depth = self.encoder.cfg.vision_depth
        tasks = self.tasks
        if not tasks or not self.dists.tasks:
            return Prediction(classify(base_img, base_txt), np.zeros((len(pixels), depth), dtype=bool))

        decisions = route_batch(f_v.double().numpy(), self.dists, self.routing)
        task_index = torch.tensor([tasks.index(d.task) for d in decisions])
        weight = torch.tensor([d.weight for d in decisions], dtype=f_v.dtype)
        hooks, opens = self.vision_hooks(f_v, task_index, weight, False, generator)
        active = weight > 0
        img = self.encoder.encode_image(pixels, hooks) if bool(active.any()) else base_img

        txt = base_txt.expand(len(pixels), *base_txt.shape).clone()
        e_txt = text_prompt_weight([d.best_score + self.routing.score_offset for d in decisions])
        for i, t in enumerate(tasks):
            rows = active & (task_index == i)
            if bool(rows.any()):
                txt[rows] = self.encoder.encode_text(tokens, self.text_hooks(t, e_txt))
        labels = torch.argmax(cosine_logits(img, txt), dim=-1)
        return Prediction(labels, opens.numpy(), decisions)


# --------------------------------------------------------------------------- sessions

@dataclass
class SessionResult:
    task_id: int
    epoch_losses: list


def train_session(model: IAPModel, data: DomainData, task_id: int, optim: OptimConfig,
                  generator: torch.Generator) -> SessionResult:
    """Train task ``task_id``'s pools and gates, then fit its feature Gaussians."""
    if any(p.requires_grad for p in model.encoder.parameters()):
        raise StateError("backbone must be frozen before an incremental session")
    if task_id in model.gates:
        raise StateError(f"task {task_id} was already trained; its parameters are frozen")
    model.library.add_task(task_id, generator)
    model.gates[task_id] = GateParams.create(task_id, model.encoder.cfg.vision_depth,
                                             model.encoder.cfg.width, model.gate_cfg, generator)
    trainable = model.library.parameters(task_id)
    if model.gate_cfg.mode in ("hard", "soft"):
        trainable.update(model.gates[task_id].parameters())
    trainable.set_trainable(True)

    n = data.train_x.shape[0]
    losses = []
    for _ in range(optim.epochs):
        perm = torch.randperm(n, generator=generator)
        total = 0.0
        for start in range(0, n, optim.batch_size):
            idx = perm[start:start + optim.batch_size]
            loss, _ = model.training_loss(data.train_x[idx], data.train_y[idx], data.text_tokens,
                                          task_id, generator)
            loss.backward()
            dc.sgd_step(trainable, optim.lr)
            total += float(loss.detach()) * len(idx)
        losses.append(total / n)
    trainable.set_trainable(False)

    feats = model.frozen_features(data.train_x).double().numpy()
    labels = data.train_y.numpy()
    model.dists.add(fit_task_stats(feats, task_id, model.routing.task_reg),
                    fit_class_stats(feats, labels, task_id, model.routing.class_reg))
    return SessionResult(task_id, losses)


@dataclass
class TaskEvaluation:
    accuracy: float
    open_layers: np.ndarray
    decisions: list


def evaluate_task(model: IAPModel, data: DomainData, batch_size: int,
                  generator: torch.Generator | None = None) -> TaskEvaluation:
    correct = 0
    opens, decisions = [], []
    n = data.test_x.shape[0]
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        pred = model.predict(data.test_x[sl], data.text_tokens, generator)
        correct += int((pred.labels == data.test_y[sl]).sum())
        opens.append(pred.open_layers)
        decisions.extend(pred.decisions or [])
    return TaskEvaluation(correct / n, np.concatenate(opens), decisions)


def evaluate_all(model: IAPModel, datas: Sequence[DomainData], batch_size: int,
                 seed: int = 0) -> tuple[list[float], list[TaskEvaluation]]:
    """Accuracy on every task's test split (one accuracy-matrix row)."""
    evals = [evaluate_task(model, d, batch_size, torch_generator(derive_seed(seed, "eval", j)))
             for j, d in enumerate(datas)]
    return [e.accuracy for e in evals], evals


# --------------------------------------------------------------------------- metrics

@dataclass
class MetricsReport:
    transfer: list            # None for task 0
    average: list
    last: list
    zero_shot: list
    transfer_mean: Optional[float]
    average_mean: float
    last_mean: float
    zero_shot_mean: float
    open_layers: dict = field(default_factory=dict)


def compute_metrics(A, zero_shot: Sequence[float] | None = None,
                    open_layers: dict | None = None) -> MetricsReport:
    """Transfer_j = mean_{s<j} A[s, j]; Average_j = mean_s A[s, j]; Last_j = A[T-1, j]."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0 or np.isnan(A).any():
        raise StateError(f"accuracy matrix must be a complete square grid, got shape {A.shape}")
    T = A.shape[0]
    transfer = [None] + [float(A[:j, j].mean()) for j in range(1, T)]
    average = [float(A[:, j].mean()) for j in range(T)]
    last = [float(v) for v in A[T - 1]]
    defined = [v for v in transfer if v is not None]
    zs = [float(v) for v in zero_shot] if zero_shot is not None else [float("nan")] * T
    return MetricsReport(
        transfer, average, last, zs,
        float(np.mean(defined)) if defined else None,
        float(np.mean(average)), float(np.mean(last)), float(np.mean(zs)),
        dict(open_layers or {}),
    )


# --------------------------------------------------------------------------- full run

@dataclass
class RunResult:
    config: RunConfig
    task_names: list
    accuracy: np.ndarray
    zero_shot: list
    metrics: MetricsReport
    sessions: list
    routing_rows: list        # final-session telemetry
    task_checksums: list      # per session: {task_id: checksum of pools+gates+stats}
    model: IAPModel
    layer_open_rates: dict = field(default_factory=dict)   # task -> per-layer open fraction


def task_state(model: IAPModel, task_id: int) -> dict:
    """Named tensors owned by one task: prompt pools, gates and feature statistics."""
    out = dict(model.task_parameters(task_id).items())
    dist = model.dists.tasks[task_id]
    out[f"stats/{task_id}/mu"], out[f"stats/{task_id}/sigma"] = dist.mu, dist.sigma
    for c in model.dists.classes[task_id]:
        out[f"stats/{task_id}/{c.class_id}/mu"], out[f"stats/{task_id}/{c.class_id}/sigma"] = c.mu, c.sigma
    return out


def model_state(model: IAPModel) -> dict:
    """Every named tensor of the model, backbone first, then tasks in id order."""
    out = dict(model.encoder.parameter_set().items())
    for t in model.tasks:
        out.update(task_state(model, t))
    return out


def restore_model(tensors: dict, cfg: RunConfig) -> IAPModel:
    """Rebuild an :class:`IAPModel` from :func:`model_state` tensors (e.g. a loaded checkpoint)."""
    encoder = build_encoder(cfg)
    load_backbone(encoder, tensors)
    model = IAPModel(encoder, cfg.prompt, cfg.gate, cfg.routing)
    tasks = sorted({int(n.split("/")[1]) for n in tensors if n.startswith("gate/")})
    dtype = torch.get_default_dtype()
    for t in tasks:
        scratch = torch.Generator()  # initial values are overwritten below
        model.library.add_task(t, scratch)
        model.gates[t] = GateParams.create(t, cfg.encoder.vision_depth, cfg.encoder.width, cfg.gate, scratch)
        with torch.no_grad():
            for name, p in model.task_parameters(t).items():
                if name not in tensors:
                    raise StateError(f"checkpoint lacks {name}")
                p.copy_(torch.as_tensor(tensors[name], dtype=dtype))
        task = distribution_from_moments(tensors[f"stats/{t}/mu"], tensors[f"stats/{t}/sigma"],
                                         cfg.routing.task_reg, TaskDistribution, task_id=t)
        class_ids = sorted({int(n.split("/")[2]) for n in tensors
                            if n.startswith(f"stats/{t}/") and n.count("/") == 3})
        classes = [distribution_from_moments(tensors[f"stats/{t}/{c}/mu"], tensors[f"stats/{t}/{c}/sigma"],
                                             cfg.routing.class_reg, ClassDistribution, task_id=t, class_id=c)
                   for c in class_ids]
        model.dists.add(task, classes)
    return model


def stats_checksum(model: IAPModel, task_id: int) -> str:
    """SHA-256 over one task's pools, gates and statistics (names, shapes and values)."""
    h = hashlib.sha256()
    for name, value in task_state(model, task_id).items():
        arr = value.detach().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def prepare_data(cfg: RunConfig):
    world, stream, pre_specs, _ = build_stream(cfg.stream, cfg.encoder, derive_seed(cfg.seed, "world"))
    pre = [generate_domain(s, derive_seed(cfg.seed, "pretrain-domain", i), cfg.encoder)
           for i, s in enumerate(pre_specs)]
    datas = [generate_domain(s, derive_seed(cfg.seed, "domain", s.domain_id), cfg.encoder)
             for s in stream.domains]
    return stream, pre, datas


def run_stream(cfg: RunConfig, encoder: DualEncoder | None = None,
               progress: Callable[[str], None] | None = None) -> RunResult:
    """Full MTIL run.  Pass a pre-trained frozen ``encoder`` to skip pre-training."""
    say = progress or log.info
    torch.set_num_threads(cfg.threads)
    stream, pre, datas = prepare_data(cfg)
    if encoder is None:
        encoder = obtain_backbone(cfg, pre, say)
    encoder.freeze()
    model = IAPModel(encoder, cfg.prompt, cfg.gate, cfg.routing)

    zero_shot, _ = evaluate_all(model, datas, cfg.optim.eval_batch_size, derive_seed(cfg.seed, "eval", -1))
    say(f"zero-shot row: {np.round(zero_shot, 4).tolist()}")
    T = len(datas)
    A = np.full((T, T), np.nan)
    sessions, checksums = [], []
    evals = []
    for s, data in enumerate(datas):
        gen = torch_generator(derive_seed(cfg.seed, "session", s))
        sessions.append(train_session(model, data, s, cfg.optim, gen))
        row, evals = evaluate_all(model, datas, cfg.optim.eval_batch_size, derive_seed(cfg.seed, "eval", s))
        A[s] = row
        checksums.append({t: stats_checksum(model, t) for t in model.tasks})
        say(f"session {s} ({data.spec.name}): losses {np.round(sessions[-1].epoch_losses, 4).tolist()} "
            f"row {np.round(row, 4).tolist()}")

    open_layers = gate_usage_stats((j, row) for j, e in enumerate(evals) for row in e.open_layers)
    metrics = compute_metrics(A, zero_shot, open_layers)
    rows = []
    for j, e in enumerate(evals):
        for i, d in enumerate(e.decisions):
            rows.append((f"{j}:{i}", d.task, d.stage, d.e_max, d.weight))
    rates = {j: [float(v) for v in np.asarray(e.open_layers, dtype=np.float64).mean(axis=0)]
             for j, e in enumerate(evals)}
    return RunResult(cfg, stream.names, A, zero_shot, metrics, sessions, rows, checksums, model, rates)
