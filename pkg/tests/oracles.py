"""Independent reference implementations used only by the tests."""

import itertools

import numpy as np

from kmp import autodiff as ad


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    g = np.zeros_like(x)
    for idx in itertools.product(*map(range, x.shape)):
        old = x[idx]
        x[idx] = old + eps
        hi = f()
        x[idx] = old - eps
        lo = f()
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def grad_check(build, params: list, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``build()`` returns a 1x1 loss tensor computed from ``params``.
    """
    for p in params:
        p.grad = None
    ad.backward(build())
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: build().item(), p.value, eps)
        ana = p.grad if p.grad is not None else np.zeros_like(p.value)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        worst = max(worst, float(np.abs(num - ana).max() / scale))
    return worst


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def loop_mapping(kind: str, h: np.ndarray, **kw) -> np.ndarray:
    """Mapping matrix by explicit O(m^2) pair loops."""
    m = h.shape[0]
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            x, y = h[i], h[j]
            if kind == "gaussian":
                out[i, j] = np.exp(-np.sum((x - y) ** 2) / (4 * kw["T"]))
            elif kind == "polynomial":
                out[i, j] = (np.dot(x, y) + kw["c"]) ** kw["d"]
            elif kind == "sigmoid":
                out[i, j] = sigmoid(kw["a"] * np.dot(x, y) + kw["b"])
            elif kind == "randomized":
                tot = 0.0
                for xi, M in zip(kw["xi"], kw["M"]):
                    tot += np.exp(xi) * np.dot(sigmoid(M @ x), sigmoid(M @ y))
                out[i, j] = tot / len(kw["xi"])
            elif kind == "reverse":
                W = kw["W"]
                out[i, j] = np.dot(sigmoid(W @ x), sigmoid(W @ y))
    return out


def edge_filter_subgraph(n: int, edges, observed):
    """Induced subgraph edge set by filtering the original edge list."""
    keep = set(int(i) for i in observed)
    order = {v: i for i, v in enumerate(sorted(keep))}
    out = set()
    for u, v in edges:
        if u in keep and v in keep and u != v:
            a, b = order[u], order[v]
            out.add((min(a, b), max(a, b)))
    return out


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def glnn_loss(student_logits, labels, labeled_mask, teacher_logits, theta, tau):
    """Soft-target distillation loss written directly in numpy."""
    lab = np.flatnonzero(labeled_mask)
    soft = np.flatnonzero(~labeled_mask)
    total = 0.0
    if theta > 0:
        ls = student_logits[lab] - student_logits[lab].max(axis=1, keepdims=True)
        logp = ls - np.log(np.exp(ls).sum(axis=1, keepdims=True))
        total += theta * -logp[np.arange(lab.size), labels[lab]].mean()
    if theta < 1 and soft.size:
        p = softmax(teacher_logits[soft] / tau)
        zs = student_logits[soft] / tau
        zs = zs - zs.max(axis=1, keepdims=True)
        logq = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        kl = (np.where(p > 0, p * np.log(np.where(p > 0, p, 1)), 0) - p * logq).sum() / soft.size
        total += (1 - theta) * tau * tau * kl
    return total
