"""Sparsemax attention: single-head core, multi-head, self and cross variants.

``mha_forward``/``mha_backward`` carry caches for training; the public
functions (``sparse_attention``, ``multi_head_sparse_attention``,
``self_attention``, ``cross_attention``) are thin inference wrappers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AdmissibilityError, ConfigError, DimensionError
from .masking import AttentionMask, PatternSpec, compose, make_causal_mask, make_full_mask
from .sparsemax import sparsemax_backward, sparsemax_rows
from .tensor import as_tensor, matmul


@dataclass(frozen=True)
class AttentionOutput:
    context: np.ndarray
    weights: np.ndarray
    pairs_attended: int


@dataclass(frozen=True)
class AttentionWeights:
    """Projections for all heads. Head ``h`` owns columns ``h*d_k:(h+1)*d_k``
    of ``wq``/``wk``/``wv`` and the matching rows of ``wo``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def from_dict(cls, params, prefix: str) -> "AttentionWeights":
        return cls(*(params[f"{prefix}.{n}"] for n in ("wq", "wk", "wv", "wo")))

    @property
    def D(self) -> int:
        return self.wq.shape[0]


def _check_mask(mask: AttentionMask, n_q: int, n_k: int):
    if mask.shape != (n_q, n_k):
        raise DimensionError(f"mask shape {mask.shape} does not match scores ({n_q}, {n_k})")


def sparse_attention(Q, K, V, mask: AttentionMask | None = None) -> AttentionOutput:
    """``sparsemax(Q K^T / sqrt(d_k) + M) V`` with row-wise sparsemax.

    Leading batch axes are allowed; the same mask applies to all of them.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"Q {Q.shape} and K {K.shape} disagree on d_k")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"K {K.shape} and V {V.shape} disagree on n_k")
    n_q, n_k = Q.shape[-2], K.shape[-2]
    if mask is None:
        mask = make_full_mask(n_q, n_k)
    _check_mask(mask, n_q, n_k)
    scores = matmul(Q, np.swapaxes(K, -1, -2)) / math.sqrt(Q.shape[-1])
    try:
        weights, _ = sparsemax_rows(scores + mask.values)
    except AdmissibilityError:
        raise AdmissibilityError("a query row has no allowed key") from None
    return AttentionOutput(matmul(weights, V), weights, int(np.count_nonzero(weights > 0)))


def split_heads(x, n_heads):
    B, n, D = x.shape
    return x.reshape(B, n, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    B, H, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, H * dk)


def _flat(x):
    return x.reshape(-1, x.shape[-1])


def _resolve_masks(pattern, base, scores_avg, n_q, n_k):
    """Mask values of shape (B or 1, 1, n_q, n_k) plus the concrete masks."""
    if pattern is None:
        pattern = make_full_mask(n_q, n_k)
    if isinstance(pattern, AttentionMask):
        _check_mask(pattern, n_q, n_k)
        mask = pattern if base is None else compose(base, pattern)
        return mask.values[None, None], [mask]
    if not isinstance(pattern, PatternSpec):
        raise TypeError(f"unsupported mask/pattern {pattern!r}")
    if not pattern.dynamic:
        mask = pattern.build(n_q, n_k, base=base)
        return mask.values[None, None], [mask]
    masks = [pattern.build(n_q, n_k, scores=s, base=base) for s in scores_avg]
    return np.stack([m.values for m in masks])[:, None], masks


def mha_forward(x_q, x_kv, w: AttentionWeights, n_heads: int, pattern=None,
                base: AttentionMask | None = None):
    """Multi-head sparsemax attention on batched inputs ``(B, n, D)``.

    ``pattern`` is an ``AttentionMask``, a ``PatternSpec`` or ``None`` (full).
    Dynamic top-k patterns pick keys from the head-averaged scaled scores.
    Returns ``(out, cache)``.
    """
    D = w.D
    if D % n_heads:
        raise ConfigError(f"model dimension {D} is not divisible by {n_heads} heads")
    if x_q.shape[-1] != D or x_kv.shape[-1] != D:
        raise DimensionError(f"inputs {x_q.shape}, {x_kv.shape} do not match D={D}")
    n_q, n_k = x_q.shape[1], x_kv.shape[1]
    dk = D // n_heads
    Q = split_heads(matmul(x_q, w.wq), n_heads)
    K = split_heads(matmul(x_kv, w.wk), n_heads)
    V = split_heads(matmul(x_kv, w.wv), n_heads)
    scores = matmul(Q, np.swapaxes(K, -1, -2)) / math.sqrt(dk)
    mask_values, masks = _resolve_masks(pattern, base, scores.mean(axis=1), n_q, n_k)
    P, _ = sparsemax_rows(scores + mask_values)
    ctx = merge_heads(matmul(P, V))
    out = matmul(ctx, w.wo)
    cache = dict(x_q=x_q, x_kv=x_kv, Q=Q, K=K, V=V, P=P, ctx=ctx, masks=masks, w=w,
                 n_heads=n_heads)
    return out, cache


def mha_backward(dout, cache):
    """Returns ``(dx_q, dx_kv, grads)`` with grads keyed ``wq/wk/wv/wo``.

    The mask is treated as a constant, which is exact away from top-k ties.
    """
    w, H = cache["w"], cache["n_heads"]
    Q, K, V, P = cache["Q"], cache["K"], cache["V"], cache["P"]
    dk = Q.shape[-1]
    grads = {"wo": matmul(_flat(cache["ctx"]).T, _flat(dout))}
    dctx = split_heads(matmul(dout, w.wo.T), H)
    dP = matmul(dctx, np.swapaxes(V, -1, -2))
    dV = matmul(np.swapaxes(P, -1, -2), dctx)
    dS = sparsemax_backward(P, dP) / math.sqrt(dk)
    dQ = merge_heads(matmul(dS, K))
    dK = merge_heads(matmul(np.swapaxes(dS, -1, -2), Q))
    dV = merge_heads(dV)
    x_q, x_kv = cache["x_q"], cache["x_kv"]
    grads["wq"] = matmul(_flat(x_q).T, _flat(dQ))
    grads["wk"] = matmul(_flat(x_kv).T, _flat(dK))
    grads["wv"] = matmul(_flat(x_kv).T, _flat(dV))
    dx_q = matmul(dQ, w.wq.T)
    dx_kv = matmul(dK, w.wk.T) + matmul(dV, w.wv.T)
    return dx_q, dx_kv, grads


def _batched(x):
    x = as_tensor(x)
    return (x[None], True) if x.ndim == 2 else (x, False)


def multi_head_sparse_attention(x_q, x_kv, w: AttentionWeights, n_heads: int, mask=None,
                                base: AttentionMask | None = None):
    """Concatenate per-head sparse attention contexts and project with ``wo``.

    Accepts ``(n, D)`` or ``(B, n, D)`` inputs; the same mask serves every head.
    """
    xq, squeeze = _batched(x_q)
    xkv, _ = _batched(x_kv)
    out, _ = mha_forward(xq, xkv, w, n_heads, mask, base)
    return out[0] if squeeze else out


def self_attention(x, w: AttentionWeights, n_heads: int, extra_pattern=None):
    """Causal self-attention, optionally narrowed further by ``extra_pattern``."""
    xb, squeeze = _batched(x)
    n = xb.shape[1]
    out, _ = mha_forward(xb, xb, w, n_heads, extra_pattern, base=make_causal_mask(n))
    return out[0] if squeeze else out


def cross_attention(x_dec, H_e, w: AttentionWeights, n_heads: int, pattern=None):
    """Queries from the decoder stream, keys and values from encoder states."""
    xb, squeeze = _batched(x_dec)
    hb, _ = _batched(H_e)
    out, _ = mha_forward(xb, hb, w, n_heads, pattern)
    return out[0] if squeeze else out


def attention_weights(x_q, x_kv, w: AttentionWeights, n_heads: int, pattern=None,
                      base: AttentionMask | None = None) -> np.ndarray:
    """Per-head weights ``(B, H, n_q, n_k)`` for inspection."""
    xq, squeeze = _batched(x_q)
    xkv, _ = _batched(x_kv)
    _, cache = mha_forward(xq, xkv, w, n_heads, pattern, base)
    return cache["P"][0] if squeeze else cache["P"]

