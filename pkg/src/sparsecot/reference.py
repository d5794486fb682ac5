"""Dense sparsemax transformer written out directly with numpy.

Serves as the oracle for the dense limit (alpha = 1, no reasoning steps,
full attention patterns) of :mod:`sparsecot.model`. Nothing here imports the
model, attention, layer or sparsemax code it is meant to check.
"""

from __future__ import annotations

import numpy as np


def project_simplex_rows(z):
    """Sort-based simplex projection of every row of ``z``."""
    u = -np.sort(-z, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, z.shape[-1] + 1)
    rho = np.count_nonzero(u - css / ind > 0, axis=-1)
    theta = np.take_along_axis(css, rho[..., None] - 1, axis=-1) / rho[..., None]
    return np.maximum(z - theta, 0.0)


def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _pe(n, D):
    pe = np.zeros((n, D))
    for pos in range(n):
        for i in range(0, D, 2):
            angle = pos / 10000 ** (i / D)
            pe[pos, i] = np.sin(angle)
            if i + 1 < D:
                pe[pos, i + 1] = np.cos(angle)
    return pe


def _mha(xq, xkv, P, prefix, H, causal):
    D = xq.shape[-1]
    dk = D // H
    heads = []
    for h in range(H):
        cols = slice(h * dk, (h + 1) * dk)
        q = xq @ P[f"{prefix}.wq"][:, cols]
        k = xkv @ P[f"{prefix}.wk"][:, cols]
        v = xkv @ P[f"{prefix}.wv"][:, cols]
        s = q @ np.swapaxes(k, -1, -2) / np.sqrt(dk)
        if causal:
            n_q, n_k = s.shape[-2:]
            s = np.where(np.tril(np.ones((n_q, n_k), dtype=bool)), s, -1e300)
        heads.append(project_simplex_rows(s) @ v)
    return np.concatenate(heads, axis=-1) @ P[f"{prefix}.wo"]


def _ffn(x, P, prefix):
    return np.maximum(x @ P[f"{prefix}.w1"] + P[f"{prefix}.b1"], 0.0) @ P[f"{prefix}.w2"] + P[f"{prefix}.b2"]


def dense_encode(P, src, D, H, L_enc):
    x = P["embed.E"][src] + _pe(src.shape[1], D)
    for l in range(L_enc):
        p = f"enc.{l}"
        x = _ln(x + _mha(x, x, P, f"{p}.attn", H, False), P[f"{p}.ln1.gamma"], P[f"{p}.ln1.beta"])
        x = _ln(x + _ffn(x, P, f"{p}.ffn"), P[f"{p}.ln2.gamma"], P[f"{p}.ln2.beta"])
    return x


def dense_logits(P, src, tgt_in, V, D, H, L_enc, L_dec):
    """Teacher-forced output logits ``(B, N_d, V)`` of the dense-limit model."""
    x = dense_encode(P, src, D, H, L_enc)
    y = P["embed.E"][tgt_in] + _pe(tgt_in.shape[1], D)
    for l in range(L_dec):
        p = f"dec.{l}"
        y = _ln(y + _mha(y, y, P, f"{p}.self", H, True), P[f"{p}.ln1.gamma"], P[f"{p}.ln1.beta"])
        y = _ln(y + _mha(y, x, P, f"{p}.cross", H, False), P[f"{p}.ln2.gamma"], P[f"{p}.ln2.beta"])
        y = _ln(y + _ffn(y, P, f"{p}.ffn"), P[f"{p}.ln3.gamma"], P[f"{p}.ln3.beta"])
    return y @ P["out.w"] + P["out.b"]


def dense_next_token_probs(P, src, tgt_in, V, D, H, L_enc, L_dec):
    return project_simplex_rows(dense_logits(P, src, tgt_in, V, D, H, L_enc, L_dec)[:, -1])
