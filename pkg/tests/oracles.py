"""Independent reference computations used by the tests.

None of these call into ``iap``; they are deliberately naive (loops, dense
inverses, explicit finite differences).
"""
from __future__ import annotations

import math

import numpy as np
import torch


def central_difference(fn, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Gradient of scalar ``fn(x)`` by central differences, one coordinate at a time."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(fn(x))
            flat[i] = orig - h
            down = float(fn(x))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b) -> float:
    a = np.asarray(a.detach() if isinstance(a, torch.Tensor) else a, dtype=np.float64).ravel()
    b = np.asarray(b.detach() if isinstance(b, torch.Tensor) else b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def matmul_loops(a, b):
    a, b = np.asarray(a), np.asarray(b)
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def softmax_direct(x):
    e = [math.exp(v) for v in x]
    s = sum(e)
    return [v / s for v in e]


def prompt_attention_loops(q, k, v):
    """O[i] = sum_j softmax_j(q_i . k_j / sqrt(d)) v_j with explicit loops (single head)."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    L, d = q.shape
    out = np.zeros((L, v.shape[1]))
    for i in range(L):
        s = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) for j in range(k.shape[0])]
        w = softmax_direct(s)
        for j in range(k.shape[0]):
            out[i] += w[j] * v[j]
    return out


def two_pass_covariance(x, reg):
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    mu = [sum(x[i, j] for i in range(n)) / n for j in range(d)]
    cov = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            cov[a, b] = sum((x[i, a] - mu[a]) * (x[i, b] - mu[b]) for i in range(n)) / n
    return np.array(mu), cov + reg * np.eye(d)


def dense_log_pdf(x, mu, sigma):
    """Gaussian log-density with an explicit inverse and determinant."""
    x, mu, sigma = (np.asarray(a, dtype=np.float64) for a in (x, mu, sigma))
    diff = x - mu
    d = mu.shape[0]
    return -0.5 * (diff @ np.linalg.inv(sigma) @ diff + d * math.log(2 * math.pi) + math.log(np.linalg.det(sigma)))


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def sort_then_average(scores, k):
    top = sorted(scores, reverse=True)[: min(k, len(scores))]
    return sum(sigmoid(s) for s in top) / len(top)


def cosine_argmax(img, txt):
    img, txt = np.asarray(img, dtype=np.float64), np.asarray(txt, dtype=np.float64)
    out = []
    for u in img:
        best, best_j = -np.inf, 0
        for j, t in enumerate(txt):
            s = float(u @ t / (np.linalg.norm(u) * np.linalg.norm(t)))
            if s > best:
                best, best_j = s, j
        out.append(best_j)
    return out
