"""Sparsemax: Euclidean projection of scores onto the probability simplex.

Scores may contain the mask sentinel (``masking.SENTINEL``); such positions
always fall below the threshold and come out exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import AdmissibilityError, NondifferentiableError, OracleSizeError
from .tensor import as_tensor

# Anything at or below this is treated as a forbidden position.
FORBIDDEN_BELOW = -1e29
BOUNDARY_TOL = 1e-9
ORACLE_MAX_N = 16


@dataclass(frozen=True)
class SupportSet:
    indices: tuple[int, ...]
    tau: float

    def __len__(self):
        return len(self.indices)


def sparsemax_rows(z):
    """Row-wise sparsemax over the last axis.

    Returns ``(p, tau)`` where ``tau`` has shape ``z.shape[:-1]``.
    """
    z = as_tensor(z)
    if z.ndim == 0 or z.shape[-1] == 0:
        raise ValueError("sparsemax of an empty vector")
    if np.any(z.max(axis=-1) <= FORBIDDEN_BELOW):
        raise AdmissibilityError("no admissible position in score row")
    n = z.shape[-1]
    # stable descending order: ties keep lower original index first
    order = np.argsort(-z, axis=-1, kind="stable")
    zs = np.take_along_axis(z, order, axis=-1)
    cssv = np.cumsum(zs, axis=-1)
    ks = np.arange(1, n + 1, dtype=z.dtype)
    cond = 1.0 + ks * zs > cssv
    # cond is true on a prefix; its length is the support size
    k = cond.sum(axis=-1)
    tau = (np.take_along_axis(cssv, k[..., None] - 1, axis=-1)[..., 0] - 1.0) / k
    p = np.maximum(z - tau[..., None], 0.0)
    return p, tau


def sparsemax(z):
    """Sparsemax of a 1-d score vector; returns ``(p, SupportSet)``."""
    z = as_tensor(z)
    if z.ndim != 1:
        raise ValueError(f"sparsemax expects a vector, got shape {z.shape}")
    p, tau = sparsemax_rows(z)
    return p, SupportSet(tuple(int(i) for i in np.flatnonzero(p > 0)), float(tau))


def sparsemax_backward(p, grad_p):
    """Vector-Jacobian product of sparsemax, row-wise over the last axis.

    Uses only the output ``p``: on the support the Jacobian is
    ``I - 1 1^T / |S|``, elsewhere zero.
    """
    s = (p > 0).astype(p.dtype)
    mean = (grad_p * s).sum(axis=-1, keepdims=True) / s.sum(axis=-1, keepdims=True)
    return s * (grad_p - mean)


def sparsemax_jacobian(z):
    """Closed-form Jacobian ``diag(s) - s s^T / |S|`` at a differentiable point."""
    z = as_tensor(z)
    p, support = sparsemax(z)
    if np.any(np.abs(z - support.tau) < BOUNDARY_TOL):
        raise NondifferentiableError(
            f"score within {BOUNDARY_TOL:g} of threshold tau={support.tau:.17g}"
        )
    s = (p > 0).astype(z.dtype)
    return np.diag(s) - np.outer(s, s) / s.sum()


def sparsemax_loss(z, target: int):
    """Sparsemax loss and its gradient for a single score vector.

    ``loss = -z[target] + 1/2 * sum_{j in S} (z_j^2 - tau^2) + 1/2``,
    ``grad = sparsemax(z) - onehot(target)``.
    """
    z = as_tensor(z)
    n = z.shape[0]
    if not 0 <= target < n:
        raise IndexError(f"target {target} out of range for {n} classes")
    loss, grad = sparsemax_loss_rows(z[None, :], np.array([target]))
    return float(loss[0]), grad[0]


def sparsemax_loss_rows(z, targets):
    """Vectorised sparsemax loss over rows of ``z`` (shape ``(..., n)``)."""
    z = as_tensor(z)
    targets = np.asarray(targets)
    n = z.shape[-1]
    if np.any(targets < 0) or np.any(targets >= n):
        raise IndexError(f"target out of range for {n} classes")
    p, tau = sparsemax_rows(z)
    supp = p > 0
    sq = np.where(supp, z * z - tau[..., None] ** 2, 0.0).sum(axis=-1)
    zt = np.take_along_axis(z, targets[..., None], axis=-1)[..., 0]
    loss = np.maximum(-zt + 0.5 * sq + 0.5, 0.0)
    grad = p.copy()
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
    return loss, grad


@lru_cache(maxsize=None)
def _subsets(n: int) -> np.ndarray:
    """All non-empty subsets of ``range(n)`` as rows of a boolean matrix."""
    codes = np.arange(1, 2 ** n)
    return (codes[:, None] >> np.arange(n)[None, :]) & 1 == 1


def simplex_project_oracle(z):
    """Brute-force simplex projection by enumerating candidate supports.

    For every non-empty subset the equality-constrained projection is solved in
    closed form; candidates violating nonnegativity or complementary slackness
    are dropped and the closest feasible point wins.
    """
    z = as_tensor(z)
    n = z.shape[0]
    if n == 0:
        raise ValueError("oracle needs a non-empty vector")
    if n > ORACLE_MAX_N:
        raise OracleSizeError(f"oracle limited to n <= {ORACLE_MAX_N}, got {n}")
    S = _subsets(n)
    tau = (np.where(S, z, 0.0).sum(axis=1) - 1.0) / S.sum(axis=1)
    p = np.where(S, z - tau[:, None], 0.0)
    feasible = (np.where(S, p, 0.0) >= -1e-12).all(axis=1)
    feasible &= np.where(S, True, z <= tau[:, None] + 1e-12).all(axis=1)
    dist = ((np.maximum(p, 0.0) - z) ** 2).sum(axis=1)
    best = np.flatnonzero(feasible)[np.argmin(dist[feasible])]
    return np.maximum(p[best], 0.0)
