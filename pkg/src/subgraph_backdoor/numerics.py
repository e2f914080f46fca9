"""Dense/sparse kernels with hand-written backward passes, Adam, and a
central-difference gradient checker.

Everything runs in float64; there is no autodiff tape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


def spmm(s, x) -> np.ndarray:
    if s.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: {s.shape} @ {x.shape}")
    if sp.issparse(s):
        return np.asarray(s @ x)
    return np.asarray(s) @ x


def matmul(a, b) -> np.ndarray:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def matmul_backward(a, b, grad):
    """Gradients of ``a @ b`` w.r.t. ``a`` and ``b``."""
    return grad @ b.T, a.T @ grad


def relu_forward(x) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, grad) -> np.ndarray:
    return grad * (x > 0)


def leaky_relu(x, slope=0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x, grad, slope=0.2) -> np.ndarray:
    return grad * np.where(x > 0, 1.0, slope)


def softmax(logits) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _rows(mask, n):
    mask = np.asarray(mask)
    if mask.dtype == bool:
        if mask.shape != (n,):
            raise ValueError("boolean mask must cover every row")
        return np.flatnonzero(mask)
    return mask.astype(np.int64).ravel()


def softmax_xent_forward(logits, labels, mask):
    """Mean cross-entropy over the masked rows.

    ``labels`` is indexed by row id (entries outside the mask are ignored);
    ``mask`` is a boolean row mask or an array of row ids. Returns the loss and
    the full probability matrix.
    """
    rows = _rows(mask, logits.shape[0])
    if rows.size == 0:
        raise ValueError("empty mask")
    labels = np.asarray(labels)
    y = labels[rows]
    k = logits.shape[1]
    if y.min() < 0 or y.max() >= k:
        raise ValueError("label outside 0..K-1 on a masked row")
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    probs = np.exp(z - logz[:, None])
    nll = logz[rows] - z[rows, y]
    return float(np.sum(nll, dtype=np.float64) / rows.size), probs


def softmax_xent_backward(probs, labels, mask) -> np.ndarray:
    rows = _rows(mask, probs.shape[0])
    grad = np.zeros_like(probs)
    grad[rows] = probs[rows]
    grad[rows, np.asarray(labels)[rows]] -= 1.0
    grad[rows] /= rows.size
    return grad


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, applied in place; returns ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("Adam moment shapes do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def numerical_gradient(f, x, eps=1e-4) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (perturbed in place, restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        grad.reshape(-1)[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(analytic, numeric, floor=1e-6) -> float:
    """Worst entry of |a - n| / max(|a|, |n|, floor).

    ``floor`` keeps entries whose true gradient is ~0 from dividing roundoff by
    roundoff.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def finite_diff_check(f, x, analytic, eps=1e-4) -> float:
    return relative_error(analytic, numerical_gradient(f, x, eps))
