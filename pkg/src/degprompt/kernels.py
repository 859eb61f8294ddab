"""Dense float64 kernels with analytic gradients.

All functions accept arrays with optional leading batch axes; "rows" and
"columns" are always the last two axes. Backward functions take the
upstream gradient of a scalar loss and return gradients for every input.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

__all__ = [
    "matmul",
    "matmul_backward",
    "softmax_rows",
    "softmax_backward",
    "cross_attention",
    "cross_attention_backward",
    "gelu",
    "gelu_backward",
]


def _check_inner(A, B):
    if A.ndim < 2 or B.ndim < 2 or A.shape[-1] != B.shape[-2]:
        raise ValueError(f"shape mismatch for matmul: {A.shape} @ {B.shape}")


def matmul(A, B):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_inner(A, B)
    return A @ B


def _sum_to(grad, shape):
    """Reduce broadcast batch axes so ``grad`` matches ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def matmul_backward(A, B, dC):
    """Gradients of ``C = A @ B``: ``dA = dC B^T``, ``dB = A^T dC``."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    _check_inner(A, B)
    if dC.shape[-2:] != (A.shape[-2], B.shape[-1]):
        raise ValueError(f"upstream gradient shape {dC.shape} does not match product")
    dA = dC @ np.swapaxes(B, -1, -2)
    dB = np.swapaxes(A, -1, -2) @ dC
    return _sum_to(dA, A.shape), _sum_to(dB, B.shape)


def softmax_rows(M):
    """Row-wise softmax with max subtraction."""
    M = np.asarray(M, dtype=np.float64)
    z = M - M.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(S, dS):
    """Vector-Jacobian product of the row softmax given its output ``S``."""
    return S * (dS - (dS * S).sum(axis=-1, keepdims=True))


def cross_attention(Q, K, V, d):
    """``softmax(Q K^T / sqrt(d)) V``.

    Returns ``(out, cache)``; ``cache`` feeds :func:`cross_attention_backward`.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.shape[-1] != d or K.shape[-1] != d:
        raise ValueError(f"query/key width must equal d={d}: {Q.shape}, {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ValueError(f"keys and values need equal row counts: {K.shape}, {V.shape}")
    scale = 1.0 / math.sqrt(d)
    weights = softmax_rows((Q @ np.swapaxes(K, -1, -2)) * scale)
    out = weights @ V
    return out, (Q, K, V, weights, scale)


def cross_attention_backward(cache, d_out):
    Q, K, V, weights, scale = cache
    d_weights = d_out @ np.swapaxes(V, -1, -2)
    dV = np.swapaxes(weights, -1, -2) @ d_out
    d_scores = softmax_backward(weights, d_weights) * scale
    dQ = d_scores @ K
    dK = np.swapaxes(d_scores, -1, -2) @ Q
    return dQ, dK, dV


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact (erf) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_backward(x, dy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)
