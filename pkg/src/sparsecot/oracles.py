"""Self-check suites pairing each fast path with an independent oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cost import closed_form_pairs, count_attended_pairs
from .errors import OracleSizeError
from .masking import PatternSpec
from .model import ModelConfig, decoder_logits, encode, init_params
from .reference import dense_logits
from .sparsemax import ORACLE_MAX_N, simplex_project_oracle, sparsemax


@dataclass(frozen=True)
class OracleResult:
    name: str
    cases: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: cases={self.cases} max_error={self.max_error:.3e} tol={self.tolerance:.0e}"


def sparsemax_oracle_suite(cases: int = 1000, min_n: int = 2, max_n: int = 10,
                           seed: int = 0) -> OracleResult:
    if max_n > ORACLE_MAX_N:
        raise OracleSizeError(f"oracle limited to n <= {ORACLE_MAX_N}, got {max_n}")
    rng = np.random.default_rng([seed, 101])
    worst = 0.0
    for _ in range(cases):
        n = int(rng.integers(min_n, max_n + 1))
        z = rng.normal(scale=rng.choice([0.1, 1.0, 5.0]), size=n)
        p, _ = sparsemax(z)
        worst = max(worst, float(np.abs(p - simplex_project_oracle(z)).max()))
    return OracleResult("sparsemax-vs-enumeration", cases, worst, 1e-9)


def pattern_family(n: int):
    """Every parameterised pattern over an ``n x n`` grid, parameters 1..n."""
    yield PatternSpec("full")
    yield PatternSpec("causal", None, True)
    for p in range(1, n + 1):
        for causal in (False, True):
            yield PatternSpec("window", p, causal)
            yield PatternSpec("strided", p, causal)


def pair_count_suite(max_seq: int = 128, seed: int = 0, step: int = 1) -> OracleResult:
    """Enumerated mask counts against closed forms for all n <= ``max_seq``.

    Top-k masks are built from seeded random scores.
    """
    rng = np.random.default_rng([seed, 202])
    cases = mismatches = 0
    for n in range(1, max_seq + 1, step):
        for spec in pattern_family(n):
            mask = spec.build(n, n)
            cases += 1
            mismatches += count_attended_pairs(mask) != closed_form_pairs(spec, n)
        scores = rng.normal(size=(n, n))
        for k in range(1, n + 1):
            for causal in (False, True):
                spec = PatternSpec("topk", k, causal)
                cases += 1
                mismatches += count_attended_pairs(spec.build(n, n, scores=scores)) != closed_form_pairs(spec, n)
    return OracleResult("pair-counts-vs-closed-form", cases, float(mismatches), 0.0)


def dense_limit_suite(cases: int = 50, seed: int = 0) -> OracleResult:
    """Full model at alpha=1, T=0, full patterns versus the dense reference."""
    cfg = ModelConfig(V=11, D=8, H=2, L_enc=2, L_dec=2, alpha=1.0, T=0, enc_pattern="full",
                      dec_self_pattern="causal", cross_pattern="full", seed=seed)
    rng = np.random.default_rng([seed, 303])
    worst = 0.0
    for i in range(cases):
        params = init_params(cfg.replace(seed=seed * 1000 + i))
        B, n, m = int(rng.integers(1, 4)), int(rng.integers(1, 7)), int(rng.integers(1, 7))
        src = rng.integers(0, cfg.V, size=(B, n))
        tgt = rng.integers(0, cfg.V, size=(B, m))
        H_e, _ = encode(src, params, cfg)
        got = decoder_logits(tgt, H_e, params, cfg)
        want = dense_logits(params.tensors, src, tgt, cfg.V, cfg.D, cfg.H, cfg.L_enc, cfg.L_dec)
        worst = max(worst, float(np.abs(got - want).max()))
    return OracleResult("dense-limit-vs-reference", cases, worst, 1e-12)
