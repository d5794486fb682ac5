"""Latent chain-of-thought: repeated sparse reasoning-state updates.

Each step attends over ``x_sparse + C_prev``, applies Add & Norm, a
feed-forward block and a second Add & Norm, then keeps only the most
active dimensions (mean absolute activation over batch and positions).
The masked result is both the new state and the next step's context.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionWeights, mha_backward, mha_forward
from .errors import ConfigError, DimensionError
from .layers import FeedForwardParams, feed_forward, feed_forward_backward
from .masking import make_dimension_mask
from .tensor import as_tensor, layer_norm, layer_norm_backward

TRACE_COLUMNS = ("step", "mean_support_size", "mask_popcount", "state_norm")


@dataclass(frozen=True)
class StepRecord:
    step: int
    mean_support_size: float
    mask_popcount: int
    state_norm: float


@dataclass(frozen=True)
class ReasoningState:
    R: np.ndarray
    C: np.ndarray
    t: int = 0
    trace: tuple[StepRecord, ...] = field(default=())


@dataclass(frozen=True)
class CotStepParams:
    attn: AttentionWeights
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ffn: FeedForwardParams
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray

    @classmethod
    def from_dict(cls, params, prefix: str) -> "CotStepParams":
        return cls(
            AttentionWeights.from_dict(params, f"{prefix}.attn"),
            params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"],
            FeedForwardParams.from_dict(params, f"{prefix}.ffn"),
            params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"],
        )


def cot_init(x_sparse) -> ReasoningState:
    x = as_tensor(x_sparse)
    if not np.isfinite(x).all():
        raise ValueError("CoT input must be finite")
    return ReasoningState(R=x.copy(), C=np.zeros_like(x), t=0, trace=())


def cot_step_forward(state: ReasoningState, x_sparse, params: CotStepParams, alpha: float,
                     n_heads: int = 1, pattern=None):
    """One reasoning step; returns ``(new_state, cache)``."""
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}")
    x = as_tensor(x_sparse)
    if x.shape != state.C.shape or x.ndim != 3:
        raise DimensionError(f"CoT input {x.shape} does not match state {state.C.shape}")
    if params.attn.D != x.shape[-1]:
        raise DimensionError(f"step parameters expect D={params.attn.D}, input has {x.shape[-1]}")
    z = x + state.C
    a, attn_cache = mha_forward(z, z, params.attn, n_heads, pattern)
    u = layer_norm(z + a, params.ln1_gamma, params.ln1_beta)
    f = feed_forward(u, params.ffn)
    r_new = layer_norm(u + f, params.ln2_gamma, params.ln2_beta)
    importance = np.abs(r_new).mean(axis=(0, 1))
    step_mask = make_dimension_mask(x.shape[-1], alpha, "magnitude", importance=importance)
    r = step_mask.apply(r_new)
    record = StepRecord(
        step=state.t + 1,
        mean_support_size=float((attn_cache["P"] > 0).sum(axis=-1).mean()),
        mask_popcount=step_mask.popcount,
        state_norm=float(np.sqrt((r * r).sum())),
    )
    new = ReasoningState(R=r, C=r, t=state.t + 1, trace=state.trace + (record,))
    cache = dict(z=z, a=a, u=u, f=f, attn=attn_cache, mask=step_mask.bits, params=params)
    return new, cache


def cot_step(state: ReasoningState, x_sparse, params: CotStepParams, alpha: float,
             n_heads: int = 1, pattern=None) -> ReasoningState:
    return cot_step_forward(state, x_sparse, params, alpha, n_heads, pattern)[0]


def cot_step_backward(dR, cache):
    """Back-propagate a gradient on the masked state to the step input ``z``.

    The step mask is held fixed. Returns ``(dz, grads)`` with grads keyed by
    parameter suffix (``attn.wq``, ``ln1.gamma``, ``ffn.w1``, ...).
    """
    p: CotStepParams = cache["params"]
    u, f, z, a = cache["u"], cache["f"], cache["z"], cache["a"]
    d2, g2g, g2b = layer_norm_backward(dR * cache["mask"], u + f, p.ln2_gamma)
    du_ffn, gffn = feed_forward_backward(d2, u, p.ffn)
    d1, g1g, g1b = layer_norm_backward(d2 + du_ffn, z + a, p.ln1_gamma)
    dxq, dxkv, gattn = mha_backward(d1, cache["attn"])
    grads = {"ln2.gamma": g2g, "ln2.beta": g2b, "ln1.gamma": g1g, "ln1.beta": g1b}
    grads.update({f"ffn.{k}": v for k, v in gffn.items()})
    grads.update({f"attn.{k}": v for k, v in gattn.items()})
    return d1 + dxq + dxkv, grads


def run_cot_forward(x_sparse, T: int, params_list, alpha: float, n_heads: int = 1, pattern=None):
    if T < 0:
        raise ConfigError("number of reasoning steps must be >= 0")
    if len(params_list) < T:
        raise ConfigError(f"{T} steps requested but only {len(params_list)} parameter sets given")
    state = cot_init(x_sparse)
    caches = []
    for t in range(T):
        state, cache = cot_step_forward(state, x_sparse, params_list[t], alpha, n_heads, pattern)
        caches.append(cache)
    return state, caches


def run_cot(x_sparse, T: int, params_list, alpha: float, n_heads: int = 1, pattern=None):
    """Apply ``T`` reasoning steps; returns ``(final_state, trace)``."""
    state, _ = run_cot_forward(x_sparse, T, params_list, alpha, n_heads, pattern)
    return state, list(state.trace)


def run_cot_backward(dH, caches):
    """Gradient of the final state back to ``x_sparse``; per-step grads in order."""
    if not caches:
        return dH, []
    dx = np.zeros_like(dH)
    step_grads = [None] * len(caches)
    dR = dH
    for t in range(len(caches) - 1, -1, -1):
        dz, step_grads[t] = cot_step_backward(dR, caches[t])
        dx += dz
        # z_t = x + C_{t-1}; C_{t-1} is the previous masked state (zeros at t=0)
        dR = dz
    return dx, step_grads


def trace_csv(trace) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for rec in trace:
        writer.writerow([rec.step, repr(rec.mean_support_size), rec.mask_popcount,
                         repr(rec.state_norm)])
    return buf.getvalue()
