"""Dimension masks and additive attention masks.

Attention masks are dense ``(n_q, n_k)`` arrays holding ``0`` where a query
may attend a key and ``SENTINEL`` where it may not. Pattern specs are small
strings such as ``window:w=8,causal`` or ``topk:k=8+causal``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, PatternSyntaxError

SENTINEL = -1e30

DIM_STRATEGIES = ("prefix", "seeded-random", "magnitude")
PATTERN_KINDS = ("full", "causal", "window", "strided", "topk")


def active_count(D: int, alpha: float) -> int:
    """Number of active dimensions: ``max(1, round_half_up(alpha * D))``."""
    return max(1, int(math.floor(alpha * D + 0.5)))


@dataclass(frozen=True)
class DimensionMask:
    bits: np.ndarray
    alpha: float
    strategy: str

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or not np.isin(bits, (0, 1)).all():
            raise ConfigError("dimension mask bits must be a 0/1 vector")
        object.__setattr__(self, "bits", bits.astype(np.float64))

    @property
    def D(self) -> int:
        return self.bits.shape[0]

    @property
    def popcount(self) -> int:
        return int(self.bits.sum())

    def apply(self, x):
        if x.shape[-1] != self.D:
            raise DimensionError(f"mask length {self.D} does not match last axis of {x.shape}")
        return x * self.bits


def make_dimension_mask(D: int, alpha: float, strategy: str = "magnitude",
                        seed: int = 0, importance=None) -> DimensionMask:
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    if D < 1:
        raise ConfigError(f"D must be positive, got {D}")
    if strategy not in DIM_STRATEGIES:
        raise ConfigError(f"unknown dimension-mask strategy {strategy!r}")
    if (strategy == "magnitude") != (importance is not None):
        raise ConfigError("importance is required for, and only for, the magnitude strategy")
    c = active_count(D, alpha)
    if strategy == "prefix":
        keep = np.arange(c)
    elif strategy == "seeded-random":
        keep = np.random.default_rng(seed).permutation(D)[:c]
    else:
        importance = np.asarray(importance, dtype=np.float64)
        if importance.shape != (D,):
            raise DimensionError(f"importance must have shape ({D},), got {importance.shape}")
        keep = np.argsort(-importance, kind="stable")[:c]
    bits = np.zeros(D)
    bits[keep] = 1.0
    return DimensionMask(bits, alpha, strategy)


@dataclass(frozen=True)
class AttentionMask:
    values: np.ndarray
    pattern: str = "composed"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"attention mask must be 2-d, got shape {v.shape}")
        if not np.all((v == 0.0) | (v == SENTINEL)):
            raise ConfigError("attention mask entries must be 0 or SENTINEL")
        if v.shape[1] == 0 or np.any((v == SENTINEL).all(axis=1)):
            raise ConfigError(f"pattern {self.pattern!r} leaves a query row with no allowed key")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape

    @property
    def allowed(self) -> np.ndarray:
        return self.values == 0.0

    @classmethod
    def from_allowed(cls, allowed, pattern: str) -> "AttentionMask":
        return cls(np.where(allowed, 0.0, SENTINEL), pattern)


def _grid(n_q, n_k):
    i = np.arange(n_q)[:, None]
    j = np.arange(n_k)[None, :]
    return i, j


def make_full_mask(n_q: int, n_k: int | None = None) -> AttentionMask:
    n_k = n_q if n_k is None else n_k
    if n_q < 1 or n_k < 1:
        raise ConfigError("mask sizes must be positive")
    return AttentionMask(np.zeros((n_q, n_k)), "full")


def make_causal_mask(n: int, n_k: int | None = None) -> AttentionMask:
    n_k = n if n_k is None else n_k
    if n < 1 or n_k < 1:
        raise ConfigError("mask sizes must be positive")
    i, j = _grid(n, n_k)
    return AttentionMask.from_allowed(j <= i, "causal")


def make_window_mask(n: int, w: int, causal: bool, n_k: int | None = None) -> AttentionMask:
    """Local band: ``i-w < j <= i`` when causal, ``|i-j| < w`` otherwise."""
    n_k = n if n_k is None else n_k
    if w < 1:
        raise ConfigError("window width must be >= 1")
    if n < 1 or n_k < 1:
        raise ConfigError("mask sizes must be positive")
    i, j = _grid(n, n_k)
    if causal:
        allowed = (j <= i) & (j > i - w)
    else:
        allowed = np.abs(i - j) < w
    return AttentionMask.from_allowed(allowed, f"window(w={w}{',causal' if causal else ''})")


def make_strided_mask(n: int, s: int, causal: bool, n_k: int | None = None) -> AttentionMask:
    """Local band of width ``s`` plus every ``s``-th key further away."""
    n_k = n if n_k is None else n_k
    if s < 1:
        raise ConfigError("stride must be >= 1")
    if n < 1 or n_k < 1:
        raise ConfigError("mask sizes must be positive")
    i, j = _grid(n, n_k)
    d = np.abs(i - j)
    allowed = (d < s) | (d % s == 0)
    if causal:
        allowed &= j <= i
    return AttentionMask.from_allowed(allowed, f"strided(s={s}{',causal' if causal else ''})")


def compose(a: AttentionMask, b: AttentionMask) -> AttentionMask:
    """Elementwise minimum: a key is allowed only if both masks allow it."""
    if a.shape != b.shape:
        raise DimensionError(f"cannot compose masks of shapes {a.shape} and {b.shape}")
    if a.pattern == "full":
        return b
    if b.pattern == "full" or a.pattern == b.pattern:
        return a
    return AttentionMask(np.minimum(a.values, b.values), f"{a.pattern}+{b.pattern}")


def make_topk_dynamic_mask(scores, k: int, base: AttentionMask | None = None) -> AttentionMask:
    """Keep the ``k`` best-scoring base-allowed keys of every query row.

    Ties go to the lower key index. Rows with fewer than ``k`` allowed keys
    keep all of them.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if k < 1:
        raise ConfigError("top-k needs k >= 1")
    if scores.ndim != 2:
        raise DimensionError(f"scores must be 2-d, got {scores.shape}")
    if base is None:
        base = make_full_mask(*scores.shape)
    if base.shape != scores.shape:
        raise DimensionError(f"base mask {base.shape} does not match scores {scores.shape}")
    masked = np.where(base.allowed, scores, -np.inf)
    order = np.argsort(-masked, axis=1, kind="stable")[:, :k]
    keep = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=1)
    keep &= base.allowed
    tag = f"topk(k={k})" if base.pattern == "full" else f"topk(k={k})+{base.pattern}"
    return AttentionMask.from_allowed(keep, tag)


@dataclass(frozen=True)
class PatternSpec:
    """Parsed pattern spec. ``param`` is ``w``, ``s`` or ``k`` depending on kind."""

    kind: str
    param: int | None = None
    causal: bool = False
    text: str = field(default="", compare=False)

    @property
    def dynamic(self) -> bool:
        return self.kind == "topk"

    def __str__(self):
        if self.text:
            return self.text
        if self.kind in ("full", "causal"):
            return self.kind
        key = {"window": "w", "strided": "s", "topk": "k"}[self.kind]
        if self.kind == "topk":
            return f"topk:k={self.param}" + ("+causal" if self.causal else "")
        return f"{self.kind}:{key}={self.param}" + (",causal" if self.causal else "")

    def base_mask(self, n_q: int, n_k: int) -> AttentionMask:
        """The static part of the pattern (for top-k, the mask it selects within)."""
        if self.kind == "full" or (self.kind == "topk" and not self.causal):
            return make_full_mask(n_q, n_k)
        if self.kind == "causal" or self.kind == "topk":
            return make_causal_mask(n_q, n_k)
        if self.kind == "window":
            return make_window_mask(n_q, self.param, self.causal, n_k)
        return make_strided_mask(n_q, self.param, self.causal, n_k)

    def build(self, n_q: int, n_k: int | None = None, scores=None,
              base: AttentionMask | None = None) -> AttentionMask:
        """Realise the pattern, composed with an optional extra ``base`` mask."""
        n_k = n_q if n_k is None else n_k
        mask = self.base_mask(n_q, n_k)
        if base is not None:
            mask = compose(base, mask)
        if self.kind == "topk":
            if scores is None:
                raise ConfigError("top-k pattern needs scores to build a mask")
            mask = make_topk_dynamic_mask(scores, self.param, mask)
        return mask


def parse_pattern(text: str) -> PatternSpec:
    """Parse one spec: ``full``, ``causal``, ``window:w=8[,causal]``,
    ``strided:s=4[,causal]`` or ``topk:k=8[+causal]``."""
    raw = text.strip()
    kind, _, rest = raw.partition(":")
    kind = kind.strip()
    if kind not in PATTERN_KINDS:
        raise PatternSyntaxError(kind or raw, f"unknown pattern kind {kind or raw!r}")
    if kind in ("full", "causal"):
        if rest:
            raise PatternSyntaxError(rest, f"pattern {kind!r} takes no arguments, got {rest!r}")
        return PatternSpec(kind, None, kind == "causal", raw)
    key = {"window": "w", "strided": "s", "topk": "k"}[kind]
    sep = "+" if kind == "topk" else ","
    tokens = [t.strip() for t in rest.split(sep)] if rest else []
    param, causal = None, False
    for tok in tokens:
        if tok == "causal":
            causal = True
            continue
        name, eq, value = tok.partition("=")
        if not eq or name.strip() != key:
            raise PatternSyntaxError(tok, f"unexpected token {tok!r} in pattern {raw!r}")
        try:
            param = int(value)
        except ValueError:
            raise PatternSyntaxError(tok, f"non-integer value in {tok!r}") from None
        if param < 1:
            raise PatternSyntaxError(tok, f"{key} must be >= 1 in {tok!r}")
    if param is None:
        raise PatternSyntaxError(raw, f"pattern {raw!r} is missing {key}=")
    return PatternSpec(kind, param, causal, raw)


def parse_pattern_list(text: str) -> list[PatternSpec]:
    """Split a comma-separated list of specs.

    ``causal`` right after a ``window:``/``strided:`` spec is read as that
    pattern's flag, so ``full,window:w=8,causal`` yields two patterns. Specs may
    also be separated with ``;`` to avoid the ambiguity.
    """
    specs: list[str] = []
    for group in text.split(";"):
        chunks: list[str] = []
        for tok in group.split(","):
            tok = tok.strip()
            if not tok:
                raise PatternSyntaxError(tok, f"empty pattern in {text!r}")
            if tok == "causal" and chunks and chunks[-1].split(":")[0] in ("window", "strided"):
                chunks[-1] += ",causal"
            else:
                chunks.append(tok)
        specs.extend(chunks)
    return [parse_pattern(c) for c in specs]
