"""Gaussian confidence routing over frozen backbone features.

At train time each task gets a full-covariance Gaussian over its image
features, and so does every class inside it.  At inference an instance is
scored under every task Gaussian; sigmoid of the best log-likelihood either
short-circuits (clearly in or clearly out of distribution) or is refined by
averaging sigmoid class scores over the ``top_k`` best classes of the chosen
task.  All arithmetic is float64 numpy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .errors import ArgumentError, ConfigError, NumericError, StateError

LOG_2PI = math.log(2.0 * math.pi)

SHORT_OFF, SHORT_ON, STAGE_TWO, UNBOUNDED = "short_circuit_off", "short_circuit_on", "stage_two", "unbounded"


@dataclass
class RoutingConfig:
    lower: float = 0.2
    upper: float = 0.8
    top_k: int = 5
    task_reg: float = 1e-7
    class_reg: float = 1e-3
    score_offset: float = 0.0
    # False reproduces the single-stage scheme: weight = sigmoid(E'_max), no bounds
    use_cddp: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lower < self.upper <= 1.0:
            raise ConfigError("routing bounds must satisfy 0 <= lower < upper <= 1")
        if self.top_k < 1:
            raise ConfigError("routing.top_k must be >= 1")
        if self.task_reg < 0 or self.class_reg < 0:
            raise ConfigError("routing regularizers must be non-negative")


@dataclass
class Gaussian:
    """Mean, regularized covariance and its cached lower Cholesky factor."""

    mu: np.ndarray
    sigma: np.ndarray
    reg: float
    chol: np.ndarray = field(repr=False)
    logdet: float

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass
class TaskDistribution(Gaussian):
    task_id: int = 0


@dataclass
class ClassDistribution(Gaussian):
    task_id: int = 0
    class_id: int = 0


def _factorize(mu: np.ndarray, sigma: np.ndarray, reg: float):
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        cond = np.linalg.cond(sigma)
        raise NumericError(
            f"covariance not positive definite after regularization (lambda={reg:g}, condition number={cond:.3g})"
        ) from None
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return dict(mu=mu, sigma=sigma, reg=reg, chol=chol, logdet=logdet)


def _moments(features: np.ndarray, reg: float):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError(f"need a non-empty [N, d] feature matrix, got shape {x.shape}")
    mu = x.mean(axis=0)
    c = x - mu
    sigma = c.T @ c / x.shape[0]
    sigma = 0.5 * (sigma + sigma.T) + reg * np.eye(x.shape[1])
    return mu, sigma


def fit_task_stats(features, task_id: int, reg: float = 1e-7) -> TaskDistribution:
    """Sample mean and (1/N) covariance plus ``reg * I``."""
    mu, sigma = _moments(features, reg)
    return TaskDistribution(task_id=task_id, **_factorize(mu, sigma, reg))


def fit_class_stats(features, labels, task_id: int, reg: float = 1e-3) -> list[ClassDistribution]:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    out = []
    for c in np.unique(y):
        mu, sigma = _moments(x[y == c], reg)
        out.append(ClassDistribution(task_id=task_id, class_id=int(c), **_factorize(mu, sigma, reg)))
    return out


def distribution_from_moments(mu, sigma, reg: float, cls=TaskDistribution, **ids) -> Gaussian:
    """Rebuild a fitted distribution (e.g. after loading a checkpoint)."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    sigma = 0.5 * (sigma + sigma.T)
    return cls(**_factorize(mu, sigma, reg), **ids)


def log_pdf(x, dist: Gaussian):
    """Gaussian log-density of one feature ``[d]`` (returns float) or a batch ``[N, d]``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[1] != dist.dim:
        raise ArgumentError(f"feature width {xs.shape[1]} != distribution width {dist.dim}")
    w = solve_triangular(dist.chol, (xs - dist.mu).T, lower=True, check_finite=False)
    maha = np.sum(w * w, axis=0)
    out = -0.5 * (maha + dist.dim * LOG_2PI + dist.logdet)
    return float(out[0]) if single else out


@dataclass
class DistributionLibrary:
    tasks: dict = field(default_factory=dict)    # task_id -> TaskDistribution
    classes: dict = field(default_factory=dict)  # task_id -> list[ClassDistribution]

    def add(self, task: TaskDistribution, classes: Sequence[ClassDistribution]) -> None:
        self.tasks[task.task_id] = task
        self.classes[task.task_id] = list(classes)

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.tasks)


@dataclass
class RoutingDecision:
    task: int
    stage: str
    weight: float
    e_max: float                  # sigmoid(E'_max + offset)
    scores: np.ndarray            # E'_i per seen task (ordered like task_ids)

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise StateError(f"routing weight {self.weight} outside [0, 1]")

    @property
    def best_score(self) -> float:
        return float(np.max(self.scores))


def _task_scores(X: np.ndarray, library: DistributionLibrary) -> tuple[list[int], np.ndarray]:
    ids = library.task_ids
    if not ids:
        raise StateError("routing: no fitted task distributions")
    return ids, np.stack([log_pdf(X, library.tasks[t]) for t in ids], axis=1)


def stage_one(x, library: DistributionLibrary, cfg: RoutingConfig) -> RoutingDecision:
    """Pick the best task and apply the bounds.

    A ``stage_two`` outcome carries ``e_max`` as a provisional weight until
    :func:`stage_two` refines it.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    ids, scores = _task_scores(X, library)
    return _stage_one_row(ids, scores[0], cfg)


def _stage_one_row(ids, scores, cfg: RoutingConfig) -> RoutingDecision:
    r = int(np.argmax(scores))  # first maximum -> lowest task id
    e_max = float(expit(scores[r] + cfg.score_offset))
    if not cfg.use_cddp:
        return RoutingDecision(ids[r], UNBOUNDED, e_max, e_max, scores)
    if e_max <= cfg.lower:
        return RoutingDecision(ids[r], SHORT_OFF, 0.0, e_max, scores)
    if e_max >= cfg.upper:
        return RoutingDecision(ids[r], SHORT_ON, 1.0, e_max, scores)
    return RoutingDecision(ids[r], STAGE_TWO, e_max, e_max, scores)


def class_scores(x, classes: Sequence[ClassDistribution]) -> np.ndarray:
    """Log-density of ``x`` (``[d]`` or ``[N, d]``) under each class; shape ``[C]`` or ``[N, C]``."""
    if not classes:
        raise StateError("stage_two: no class distributions for the selected task")
    cols = [np.atleast_1d(log_pdf(x, c)) for c in classes]
    out = np.stack(cols, axis=-1)
    return out[0] if np.asarray(x).ndim == 1 else out


def top_k_mean_confidence(scores: np.ndarray, k: int, offset: float = 0.0) -> np.ndarray:
    """Mean of sigmoid over the ``k`` largest entries of the last axis (k clamped)."""
    s = np.asarray(scores, dtype=np.float64)
    k = min(k, s.shape[-1])
    top = -np.sort(-s, axis=-1)[..., :k]
    return expit(top + offset).mean(axis=-1)


def stage_two(x, classes: Sequence[ClassDistribution], cfg: RoutingConfig) -> float:
    return float(top_k_mean_confidence(class_scores(np.asarray(x, dtype=np.float64), classes),
                                       cfg.top_k, cfg.score_offset))


def route_instance(x, library: DistributionLibrary, cfg: RoutingConfig) -> RoutingDecision:
    return route_batch(np.atleast_2d(np.asarray(x, dtype=np.float64)), library, cfg)[0]


def route_batch(X, library: DistributionLibrary, cfg: RoutingConfig) -> list[RoutingDecision]:
    """Route every row of ``X`` independently."""
    X = np.asarray(X, dtype=np.float64)
    ids, scores = _task_scores(X, library)
    decisions = [_stage_one_row(ids, row, cfg) for row in scores]
    pending = [i for i, d in enumerate(decisions) if d.stage == STAGE_TWO]
    for i in pending:
        d = decisions[i]
        w = stage_two(X[i], library.classes.get(d.task, []), cfg)
        # sigmoid can round to exactly 0 or 1 in float64; keep the band open
        d.weight = float(np.clip(w, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0)))
    return decisions
