"""Attention cost accounting: pair counts, FLOP estimates, scaling fits."""

from __future__ import annotations

import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .attention import sparse_attention
from .errors import ConfigError, DimensionError
from .masking import AttentionMask, PatternSpec, parse_pattern
from .tensor import matmul

CSV_COLUMNS = ("seq_len", "pattern", "allowed_pairs", "active_pairs", "flops_est", "wall_ns",
               "run_id")


def count_attended_pairs(mask: AttentionMask) -> int:
    return int(np.count_nonzero(mask.values == 0.0))


def _window_causal(n, w):
    # sum_{i<n} min(i+1, w)
    if w >= n:
        return n * (n + 1) // 2
    return w * (w + 1) // 2 + (n - w) * w


def _window_symmetric(n, w):
    # n diagonal entries plus two bands of offsets 1..m-1
    m = min(w, n)
    return n + 2 * ((m - 1) * n - m * (m - 1) // 2)


def _floor_sum(n, s):
    # sum_{i<n} floor(i / s)
    q, r = divmod(n, s)
    return s * q * (q - 1) // 2 + q * r


def closed_form_pairs(pattern, n: int, param: int | None = None, causal: bool | None = None) -> int:
    """Analytic allowed-pair count for an ``n x n`` pattern.

    ``pattern`` is a spec string / ``PatternSpec`` (``"window:w=8,causal"``) or a
    bare kind name plus ``param``; bare windows and top-k default to causal.
    """
    if isinstance(pattern, str):
        if ":" in pattern or pattern in ("full", "causal"):
            spec = parse_pattern(pattern)
        else:
            if pattern not in ("window", "strided", "topk"):
                raise ConfigError(f"unknown pattern {pattern!r}")
            if param is None:
                raise ConfigError(f"pattern {pattern!r} needs a parameter")
            spec = PatternSpec(pattern, param, True if causal is None else causal)
    elif isinstance(pattern, PatternSpec):
        spec = pattern
    else:
        raise ConfigError(f"unknown pattern {pattern!r}")
    if n < 1:
        raise ConfigError("n must be >= 1")
    kind, p = spec.kind, spec.param
    if kind == "full":
        return n * n
    if kind == "causal":
        return n * (n + 1) // 2
    if kind == "window":
        return _window_causal(n, p) if spec.causal else _window_symmetric(n, p)
    if kind == "topk":
        return _window_causal(n, p) if spec.causal else n * min(p, n)
    if kind == "strided":
        if spec.causal:
            return _window_causal(n, p) + _floor_sum(n, p)
        # local band plus multiples of s beyond it, on both sides
        return _window_symmetric(n, p) + 2 * _floor_sum(n, p)
    raise ConfigError(f"no closed form for pattern {kind!r}")


def reduction_ratio(pattern, n: int) -> float:
    """Dense pairs over ``pattern`` pairs at length ``n``.

    The dense baseline matches the pattern's causality: ``n(n+1)/2`` for causal
    patterns, ``n^2`` otherwise.
    """
    spec = parse_pattern(pattern) if isinstance(pattern, str) else pattern
    dense = "causal" if spec.causal else "full"
    return closed_form_pairs(dense, n) / closed_form_pairs(spec, n)


def attention_flops(D: int, H: int, n: int, pairs: int, include_projections: bool = True) -> dict:
    """Multiply-add count (2 FLOPs each) for one attention layer.

    Scores cost ``pairs * d_k * 2`` and context ``pairs * d_v * 2`` per head;
    projections add ``4 * n * D * D * 2``.
    """
    if D % H:
        raise ConfigError(f"D={D} not divisible by H={H}")
    d_k = d_v = D // H
    score = H * pairs * d_k * 2
    context = H * pairs * d_v * 2
    projection = 4 * n * D * D * 2 if include_projections else 0
    return {"score": score, "context": context, "projection": projection,
            "total": score + context + projection}


def flops_estimate(config, n: int, pattern) -> int:
    """Total FLOPs of one attention layer of ``config`` (needs ``D``, ``H``)
    under ``pattern`` at sequence length ``n``, from closed-form pair counts."""
    return attention_flops(config.D, config.H, n, closed_form_pairs(pattern, n))["total"]


def scaling_fit(seq_lens, counts) -> float:
    """Least-squares slope of ``log(count)`` against ``log(seq_len)``."""
    x = np.log(np.asarray(seq_lens, dtype=np.float64))
    y = np.log(np.asarray(counts, dtype=np.float64))
    if x.shape != y.shape:
        raise DimensionError("seq_lens and counts differ in length")
    if len(np.unique(x)) < 4:
        raise ConfigError("scaling fit needs at least 4 distinct sequence lengths")
    xc = x - x.mean()
    return float((xc * (y - y.mean())).sum() / (xc * xc).sum())


@dataclass(frozen=True)
class CostRow:
    seq_len: int
    pattern: str
    allowed_pairs: int
    active_pairs: int
    flops_est: int
    wall_ns: int
    run_id: str

    def __post_init__(self):
        if self.allowed_pairs > self.seq_len ** 2 or self.active_pairs > self.allowed_pairs:
            raise ValueError(f"inconsistent pair counts in {self}")


@dataclass
class CostReport:
    rows: list[CostRow]

    def patterns(self) -> list[str]:
        return list(dict.fromkeys(r.pattern for r in self.rows))

    def series(self, pattern: str, column: str = "allowed_pairs"):
        rows = sorted((r for r in self.rows if r.pattern == pattern), key=lambda r: r.seq_len)
        return [r.seq_len for r in rows], [getattr(r, column) for r in rows]

    def slope(self, pattern: str, column: str = "allowed_pairs") -> float:
        return scaling_fit(*self.series(pattern, column))

    def to_csv(self, include_wall: bool = True) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = [c for c in CSV_COLUMNS if include_wall or c != "wall_ns"]
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([getattr(r, c) for c in cols])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CostReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        rows = [CostRow(int(d["seq_len"]), d["pattern"], int(d["allowed_pairs"]),
                        int(d["active_pairs"]), int(d["flops_est"]), int(d["wall_ns"]),
                        d["run_id"]) for d in reader]
        return cls(rows)


def measure_point(spec: PatternSpec, n: int, D: int, H: int, seed: int, run_id: str) -> CostRow:
    """Run one head of sparse attention on seeded random inputs and count pairs.

    Top-k patterns select keys from the same scaled scores they mask.
    """
    d_k = D // H
    rng = np.random.default_rng([seed, n, d_k])
    Q, K, V = (rng.standard_normal((n, d_k)) for _ in range(3))
    scores = matmul(Q, K.T) / math.sqrt(d_k) if spec.dynamic else None
    start = time.perf_counter_ns()
    mask = spec.build(n, n, scores=scores)
    out = sparse_attention(Q, K, V, mask)
    wall = time.perf_counter_ns() - start
    allowed = count_attended_pairs(mask)
    flops = attention_flops(D, H, n, allowed)["total"]
    return CostRow(n, str(spec), allowed, out.pairs_attended, flops, wall, run_id)


def run_sweep(patterns, seq_lens, D: int = 32, H: int = 4, seed: int = 0,
              threads: int = 1) -> CostReport:
    """Measure every (pattern, n) pair; rows come out in pattern-major order."""
    specs = [parse_pattern(p) if isinstance(p, str) else p for p in patterns]
    seq_lens = list(seq_lens)
    if any(b <= a for a, b in zip(seq_lens, seq_lens[1:])):
        raise ConfigError("sweep values must be strictly increasing")
    jobs = [(spec, n, f"{seed}-{i}") for i, (spec, n) in
            enumerate((s, n) for s in specs for n in seq_lens)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(lambda j: measure_point(j[0], j[1], D, H, seed, j[2]), jobs))
    else:
        rows = [measure_point(spec, n, D, H, seed, rid) for spec, n, rid in jobs]
    return CostReport(rows)
