"""Central-difference checks of the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelParams, activation_signature, loss_and_grads, make_batch

FD_STEP = 1e-6
# denominators below this are treated as this, so near-zero gradients are
# compared in absolute terms
REL_FLOOR = 1e-3
THRESHOLDS = {"attention": 1e-5, "ffn": 1e-6, "norm": 1e-5, "embedding": 1e-5, "output": 1e-5}


def path_of(name: str) -> str:
    if name.startswith("embed."):
        return "embedding"
    if name.startswith("out."):
        return "output"
    if any(f".{k}." in name for k in ("attn", "self", "cross")):
        return "attention"
    if ".ffn." in name:
        return "ffn"
    return "norm"


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    skipped: int = 0
    masked_embedding_grad: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def failures(self, thresholds=None):
        thresholds = THRESHOLDS if thresholds is None else thresholds
        return {p: e for p, e in self.errors.items() if not e < thresholds.get(p, 1e-5)}


def make_probe(config: ModelConfig, seq_len: int = 4, batch_size: int = 2, seed: int = 0):
    return make_batch("copy", config, seq_len, batch_size, np.random.default_rng([seed, 31]))


def grad_check(params: ModelParams, config: ModelConfig, probe, names=None,
               coords_per_tensor: int = 2, h: float = FD_STEP, seed: int = 0,
               max_attempts: int = 20) -> GradCheckReport:
    """Compare analytic gradients with central differences on sampled coordinates.

    Coordinates whose ``+h``/``-h`` evaluations change the discrete state of the
    network (a sparsemax support, a rectifier, a selected mask) sit on a
    boundary and are replaced by fresh samples.
    """
    src, tgt_in, tgt_out = probe
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grads(params, config, src, tgt_in, tgt_out)
    base_sig = activation_signature(params, config, src, tgt_in)
    report = GradCheckReport()
    masked = params.embedding_mask == 0
    report.masked_embedding_grad = float(np.abs(grads["embed.E"][:, masked]).max(initial=0.0))
    names = params.trainable_names() if names is None else list(names)
    work = params.copy()
    for name in names:
        tensor = work.tensors[name]
        path = path_of(name)
        if name == "embed.E":
            # only live dimensions of tokens present in the probe carry signal
            rows = np.unique(np.concatenate([np.ravel(src), np.ravel(tgt_in)]))
            cols = np.flatnonzero(~masked)
            candidates = [(int(r), int(c)) for r in rows for c in cols]
        else:
            candidates = [np.unravel_index(i, tensor.shape) for i in range(tensor.size)]
        done = 0
        for _ in range(max_attempts):
            if done >= coords_per_tensor:
                break
            idx = candidates[rng.integers(len(candidates))]
            orig = tensor[idx]
            tensor[idx] = orig + h
            plus_sig = activation_signature(work, config, src, tgt_in)
            lp, _ = loss_and_grads(work, config, src, tgt_in, tgt_out, need_grads=False)
            tensor[idx] = orig - h
            minus_sig = activation_signature(work, config, src, tgt_in)
            lm, _ = loss_and_grads(work, config, src, tgt_in, tgt_out, need_grads=False)
            tensor[idx] = orig
            if plus_sig != base_sig or minus_sig != base_sig:
                report.skipped += 1
                continue
            err = relative_error(float(grads[name][idx]), (lp - lm) / (2 * h))
            report.errors[path] = max(report.errors.get(path, 0.0), err)
            report.checked[path] = report.checked.get(path, 0) + 1
            done += 1
    return report
