"""Dense float64 array primitives.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
pin down the two operations whose numerics the rest of the package depends on:
a matrix product with a fixed reduction order and layer normalisation.
"""

from __future__ import annotations

import numpy as np
from threadpoolctl import ThreadpoolController

from .errors import DimensionError

DTYPE = np.float64
LN_EPS = 1e-5


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def matmul(a, b) -> np.ndarray:
    """Matrix product ``a @ b`` over the last two axes (leading axes broadcast).

    Runs on BLAS pinned to a single thread, so the reduction order is fixed and
    identical inputs give identical bytes from run to run.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _check_matmul(a, b)
    with _single_thread():
        return np.matmul(a, b)


def matmul_sequential(a, b) -> np.ndarray:
    """Reference product accumulating the inner index strictly left to right.

    One rank-1 update per inner index, no BLAS; slow but platform-independent.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    _check_matmul(a, b)
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    out = np.zeros(lead + (a.shape[-2], b.shape[-1]), dtype=DTYPE)
    for i in range(a.shape[-1]):
        out += a[..., :, i, None] * b[..., None, i, :]
    return out


def _check_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")


_limiter = None


def _single_thread():
    global _limiter
    if _limiter is None:
        _limiter = ThreadpoolController()
    return _limiter.limit(limits=1, user_api="blas")


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> np.ndarray:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm expects gamma/beta of shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def layer_norm_backward(dy, x, gamma, eps: float = LN_EPS):
    """Gradients of :func:`layer_norm` w.r.t. ``x``, ``gamma`` and ``beta``.

    ``gamma``/``beta`` gradients are summed over all leading axes.
    """
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    lead = tuple(range(x.ndim - 1))
    dgamma = (dy * xhat).sum(axis=lead)
    dbeta = dy.sum(axis=lead)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta
