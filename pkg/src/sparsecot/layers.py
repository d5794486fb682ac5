"""Embedding lookup, position-wise feed-forward, Add & Norm and the output head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, VocabularyError
from .masking import DimensionMask
from .sparsemax import sparsemax_rows
from .tensor import as_tensor, layer_norm, layer_norm_backward, matmul


@dataclass(frozen=True)
class EmbeddingTable:
    E: np.ndarray

    def __post_init__(self):
        E = as_tensor(self.E)
        if E.ndim != 2 or E.shape[0] < 2 or E.shape[1] < 2:
            raise ConfigError(f"embedding table must be V x D with V, D >= 2, got {E.shape}")
        if not np.isfinite(E).all():
            raise ConfigError("embedding table has non-finite entries")
        object.__setattr__(self, "E", E)

    @property
    def V(self) -> int:
        return self.E.shape[0]

    @property
    def D(self) -> int:
        return self.E.shape[1]


def _tokens(tokens, V):
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise VocabularyError(f"token ids must be integers, got dtype {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise VocabularyError(f"token id outside vocabulary of size {V}")
    return tokens


def embed(tokens, table: EmbeddingTable) -> np.ndarray:
    return table.E[_tokens(tokens, table.V)]


def sparse_embed(tokens, table: EmbeddingTable, dmask: DimensionMask) -> np.ndarray:
    if dmask.D != table.D:
        raise DimensionError(f"dimension mask length {dmask.D} != embedding width {table.D}")
    return embed(tokens, table) * dmask.bits


def positional_encoding(n: int, D: int) -> np.ndarray:
    """Sinusoidal encodings, shape ``(n, D)``."""
    pos = np.arange(n)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


@dataclass(frozen=True)
class FeedForwardParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def from_dict(cls, params, prefix: str) -> "FeedForwardParams":
        return cls(*(params[f"{prefix}.{n}"] for n in ("w1", "b1", "w2", "b2")))

    def check(self, D: int):
        d_ff = self.w1.shape[1]
        if (self.w1.shape != (D, d_ff) or self.b1.shape != (d_ff,)
                or self.w2.shape != (d_ff, D) or self.b2.shape != (D,)):
            raise DimensionError(
                f"feed-forward shapes {self.w1.shape}, {self.b1.shape}, {self.w2.shape}, "
                f"{self.b2.shape} inconsistent with D={D}"
            )


def feed_forward(x, p: FeedForwardParams) -> np.ndarray:
    """``relu(x W1 + b1) W2 + b2`` at every position independently."""
    x = as_tensor(x)
    p.check(x.shape[-1])
    return matmul(np.maximum(matmul(x, p.w1) + p.b1, 0.0), p.w2) + p.b2


def feed_forward_backward(dy, x, p: FeedForwardParams):
    pre = matmul(x, p.w1) + p.b1
    h = np.maximum(pre, 0.0)
    lead = tuple(range(x.ndim - 1))
    g = {
        "w2": matmul(h.reshape(-1, h.shape[-1]).T, dy.reshape(-1, dy.shape[-1])),
        "b2": dy.sum(axis=lead),
    }
    dpre = matmul(dy, p.w2.T) * (pre > 0)
    g["w1"] = matmul(x.reshape(-1, x.shape[-1]).T, dpre.reshape(-1, dpre.shape[-1]))
    g["b1"] = dpre.sum(axis=lead)
    return matmul(dpre, p.w1.T), g


def add_norm(x, sublayer_out, gamma, beta) -> np.ndarray:
    x, sublayer_out = as_tensor(x), as_tensor(sublayer_out)
    if x.shape != sublayer_out.shape:
        raise DimensionError(f"residual shapes differ: {x.shape} vs {sublayer_out.shape}")
    return layer_norm(x + sublayer_out, gamma, beta)


def add_norm_backward(dy, x, sublayer_out, gamma):
    """Gradient w.r.t. the residual sum (same for both addends), gamma, beta."""
    return layer_norm_backward(dy, x + sublayer_out, gamma)


def output_distribution(h, W_out, b_out) -> np.ndarray:
    """Sparsemax word distribution from hidden state(s) ``h``."""
    h = as_tensor(h)
    if h.shape[-1] != W_out.shape[0] or b_out.shape != (W_out.shape[1],):
        raise DimensionError(f"output head shapes {h.shape}, {W_out.shape}, {b_out.shape}")
    p, _ = sparsemax_rows(matmul(h[..., None, :], W_out)[..., 0, :] + b_out)
    return p
