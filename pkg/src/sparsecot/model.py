"""Encoder -> latent CoT -> decoder assembly, training and gradient checks.

Parameters live in one flat ``name -> array`` dict so that checkpoints,
gradients and optimiser updates all share the same keys.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import storage
from .attention import AttentionWeights, mha_backward, mha_forward
from .cot import CotStepParams, run_cot_backward, run_cot_forward
from .errors import ConfigError, TrainingError, VocabularyError
from .layers import (
    FeedForwardParams, feed_forward, feed_forward_backward, positional_encoding,
)
from .masking import DimensionMask, make_causal_mask, make_dimension_mask, parse_pattern
from .sparsemax import sparsemax_loss_rows, sparsemax_rows
from .tensor import layer_norm, layer_norm_backward, matmul

log = logging.getLogger(__name__)

INIT_SCALE = 0.1
NON_TRAINABLE = ("embed.mask", "out.mask")


@dataclass(frozen=True)
class ModelConfig:
    V: int = 16
    D: int = 32
    H: int = 2
    D_ff: int = 0  # 0 -> 4 * D
    L_enc: int = 2
    L_dec: int = 2
    alpha: float = 0.75
    T: int = 3
    enc_pattern: str = "full"
    dec_self_pattern: str = "causal"
    cross_pattern: str = "full"
    seed: int = 0
    share_cot_weights: bool = False

    def __post_init__(self):
        if self.D_ff == 0:
            object.__setattr__(self, "D_ff", 4 * self.D)
        for name in ("V", "D", "H", "D_ff", "L_enc", "L_dec"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.V < 2:
            raise ConfigError("vocabulary needs at least 2 tokens")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.D % self.H:
            raise ConfigError(f"D={self.D} is not divisible by H={self.H}")
        if not 0 < self.alpha <= 1:
            raise ConfigError(f"alpha must lie in (0, 1], got {self.alpha}")
        for name in ("enc_pattern", "dec_self_pattern", "cross_pattern"):
            parse_pattern(getattr(self, name))

    @property
    def end_token(self) -> int:
        return self.V - 1

    @property
    def start_token(self) -> int:
        return self.V - 2

    @property
    def enc_spec(self):
        return parse_pattern(self.enc_pattern)

    @property
    def dec_spec(self):
        return parse_pattern(self.dec_self_pattern)

    @property
    def cross_spec(self):
        return parse_pattern(self.cross_pattern)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not eq or key not in types:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            kind = types[key]
            try:
                if kind == "int":
                    values[key] = int(raw)
                elif kind == "float":
                    values[key] = float(raw)
                elif kind == "bool":
                    if raw.lower() not in ("true", "false", "1", "0"):
                        raise ValueError(raw)
                    values[key] = raw.lower() in ("true", "1")
                else:
                    values[key] = raw
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    def trainable_names(self):
        return [n for n in self.tensors if n not in NON_TRAINABLE]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})

    @property
    def embedding_mask(self) -> np.ndarray:
        return self.tensors["embed.mask"]

    @property
    def output_mask(self) -> np.ndarray:
        return self.tensors["out.mask"]

    def save(self, path, step: int | None = None):
        tensors = dict(self.tensors)
        if step is not None:
            tensors["meta.step"] = np.array([float(step)])
        return storage.save_checkpoint(path, tensors)

    @classmethod
    def load(cls, path) -> tuple["ModelParams", int]:
        tensors = storage.load_checkpoint(path)
        meta = tensors.pop("meta.step", np.array([0.0]))
        return cls(tensors), int(meta[0])


def _attn_names(prefix):
    return [(f"{prefix}.{n}", "w") for n in ("wq", "wk", "wv", "wo")]


def _ln_names(prefix):
    return [(f"{prefix}.gamma", "one"), (f"{prefix}.beta", "zero")]


def _ffn_names(prefix):
    return [(f"{prefix}.w1", "w"), (f"{prefix}.b1", "zero"), (f"{prefix}.w2", "w"),
            (f"{prefix}.b2", "zero")]


def cot_param_sets(config: ModelConfig) -> int:
    if config.T == 0:
        return 0
    return 1 if config.share_cot_weights else config.T


def param_layout(config: ModelConfig):
    """Ordered ``(name, shape, init)`` triples; order fixes the RNG stream."""
    D, V, F = config.D, config.V, config.D_ff
    shapes = {"wq": (D, D), "wk": (D, D), "wv": (D, D), "wo": (D, D), "gamma": (D,),
              "beta": (D,), "w1": (D, F), "b1": (F,), "w2": (F, D), "b2": (D,)}

    def block(prefix, attn_parts):
        items = []
        for attn, ln in attn_parts:
            items += _attn_names(f"{prefix}.{attn}") + _ln_names(f"{prefix}.{ln}")
        return items

    entries = [("embed.E", "w")]
    for l in range(config.L_enc):
        entries += block(f"enc.{l}", [("attn", "ln1")]) + _ffn_names(f"enc.{l}.ffn")
        entries += _ln_names(f"enc.{l}.ln2")
    for t in range(cot_param_sets(config)):
        entries += block(f"cot.{t}", [("attn", "ln1")]) + _ffn_names(f"cot.{t}.ffn")
        entries += _ln_names(f"cot.{t}.ln2")
    for l in range(config.L_dec):
        entries += block(f"dec.{l}", [("self", "ln1"), ("cross", "ln2")])
        entries += _ffn_names(f"dec.{l}.ffn") + _ln_names(f"dec.{l}.ln3")
    entries += [("out.w", "w"), ("out.b", "zero")]
    layout = []
    for name, init in entries:
        if name == "embed.E":
            shape = (V, D)
        elif name == "out.w":
            shape = (D, V)
        elif name == "out.b":
            shape = (V,)
        else:
            shape = shapes[name.rsplit(".", 1)[1]]
        layout.append((name, shape, init))
    return layout


def init_params(config: ModelConfig) -> ModelParams:
    """Seeded uniform(-0.1, 0.1) weights, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape, init in param_layout(config):
        if init == "w":
            tensors[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        elif init == "one":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    tensors["embed.mask"] = make_dimension_mask(
        config.D, config.alpha, "magnitude", importance=np.abs(tensors["embed.E"]).mean(axis=0)
    ).bits
    tensors["out.mask"] = make_dimension_mask(
        config.D, config.alpha, "magnitude", importance=np.abs(tensors["out.w"]).mean(axis=1)
    ).bits
    return ModelParams(tensors)


def dimension_masks(params: ModelParams, config: ModelConfig):
    """The embedding mask and the decoder output mask as ``DimensionMask`` objects."""
    return (DimensionMask(params.embedding_mask, config.alpha, "magnitude"),
            DimensionMask(params.output_mask, config.alpha, "magnitude"))


def _ffn(P, prefix):
    return FeedForwardParams.from_dict(P, prefix)


def _attn(P, prefix):
    return AttentionWeights.from_dict(P, prefix)


def _cot_params(P, config):
    sets = [CotStepParams.from_dict(P, f"cot.{t}") for t in range(cot_param_sets(config))]
    if config.share_cot_weights and sets:
        sets = sets * config.T
    return sets


def _cot_prefix(config, t):
    return "cot.0" if config.share_cot_weights else f"cot.{t}"


def _check_tokens(tokens, V):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
        raise VocabularyError(f"token batch must be a 2-d integer array, got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= V):
        raise VocabularyError(f"token id outside vocabulary of size {V}")
    return tokens


def _embed_forward(tokens, P):
    E, mask = P["embed.E"], P["embed.mask"]
    n = tokens.shape[1]
    return E[tokens] * mask + positional_encoding(n, E.shape[1])


def _embed_backward(dx, tokens, P, grads):
    dE = np.zeros_like(P["embed.E"])
    np.add.at(dE, tokens.reshape(-1), (dx * P["embed.mask"]).reshape(-1, dx.shape[-1]))
    grads["embed.E"] = grads.get("embed.E", 0) + dE


def _accumulate(grads, prefix, sub):
    for k, v in sub.items():
        name = f"{prefix}.{k}"
        grads[name] = grads[name] + v if name in grads else v


def _encoder_block_forward(x, P, prefix, config):
    a, ac = mha_forward(x, x, _attn(P, f"{prefix}.attn"), config.H, config.enc_spec)
    g1, b1 = P[f"{prefix}.ln1.gamma"], P[f"{prefix}.ln1.beta"]
    u = layer_norm(x + a, g1, b1)
    f = feed_forward(u, _ffn(P, f"{prefix}.ffn"))
    y = layer_norm(u + f, P[f"{prefix}.ln2.gamma"], P[f"{prefix}.ln2.beta"])
    return y, dict(x=x, a=a, u=u, f=f, attn=ac)


def _encoder_block_backward(dy, cache, P, prefix, grads):
    x, a, u, f = cache["x"], cache["a"], cache["u"], cache["f"]
    d2, gg, gb = layer_norm_backward(dy, u + f, P[f"{prefix}.ln2.gamma"])
    _accumulate(grads, f"{prefix}.ln2", {"gamma": gg, "beta": gb})
    du, gffn = feed_forward_backward(d2, u, _ffn(P, f"{prefix}.ffn"))
    _accumulate(grads, f"{prefix}.ffn", gffn)
    d1, gg, gb = layer_norm_backward(d2 + du, x + a, P[f"{prefix}.ln1.gamma"])
    _accumulate(grads, f"{prefix}.ln1", {"gamma": gg, "beta": gb})
    dxq, dxkv, gattn = mha_backward(d1, cache["attn"])
    _accumulate(grads, f"{prefix}.attn", gattn)
    return d1 + dxq + dxkv


def _encode_forward(tokens, P, config):
    x = _embed_forward(tokens, P)
    blocks = []
    for l in range(config.L_enc):
        x, c = _encoder_block_forward(x, P, f"enc.{l}", config)
        blocks.append(c)
    state, cot_caches = run_cot_forward(x, config.T, _cot_params(P, config), config.alpha,
                                        config.H, config.enc_spec)
    return state.R, dict(tokens=tokens, blocks=blocks, cot=cot_caches, trace=list(state.trace))


def _encode_backward(dH, cache, P, config, grads):
    dx, step_grads = run_cot_backward(dH, cache["cot"])
    for t, g in enumerate(step_grads):
        _accumulate(grads, _cot_prefix(config, t), g)
    for l in range(config.L_enc - 1, -1, -1):
        dx = _encoder_block_backward(dx, cache["blocks"][l], P, f"enc.{l}", grads)
    _embed_backward(dx, cache["tokens"], P, grads)


def _decoder_block_forward(y, H_e, P, prefix, config):
    n = y.shape[1]
    s, sc = mha_forward(y, y, _attn(P, f"{prefix}.self"), config.H, config.dec_spec,
                        base=make_causal_mask(n))
    y1 = layer_norm(y + s, P[f"{prefix}.ln1.gamma"], P[f"{prefix}.ln1.beta"])
    c, cc = mha_forward(y1, H_e, _attn(P, f"{prefix}.cross"), config.H, config.cross_spec)
    u = layer_norm(y1 + c, P[f"{prefix}.ln2.gamma"], P[f"{prefix}.ln2.beta"])
    f = feed_forward(u, _ffn(P, f"{prefix}.ffn")) * P["out.mask"]
    out = layer_norm(u + f, P[f"{prefix}.ln3.gamma"], P[f"{prefix}.ln3.beta"])
    return out, dict(y=y, s=s, y1=y1, c=c, u=u, f=f, self_attn=sc, cross_attn=cc)


def _decoder_block_backward(dout, cache, P, prefix, grads):
    y, s, y1, c, u, f = (cache[k] for k in ("y", "s", "y1", "c", "u", "f"))
    d3, gg, gb = layer_norm_backward(dout, u + f, P[f"{prefix}.ln3.gamma"])
    _accumulate(grads, f"{prefix}.ln3", {"gamma": gg, "beta": gb})
    du, gffn = feed_forward_backward(d3 * P["out.mask"], u, _ffn(P, f"{prefix}.ffn"))
    _accumulate(grads, f"{prefix}.ffn", gffn)
    d2, gg, gb = layer_norm_backward(d3 + du, y1 + c, P[f"{prefix}.ln2.gamma"])
    _accumulate(grads, f"{prefix}.ln2", {"gamma": gg, "beta": gb})
    dq, dH, gcross = mha_backward(d2, cache["cross_attn"])
    _accumulate(grads, f"{prefix}.cross", gcross)
    d1, gg, gb = layer_norm_backward(d2 + dq, y + s, P[f"{prefix}.ln1.gamma"])
    _accumulate(grads, f"{prefix}.ln1", {"gamma": gg, "beta": gb})
    dxq, dxkv, gself = mha_backward(d1, cache["self_attn"])
    _accumulate(grads, f"{prefix}.self", gself)
    return d1 + dxq + dxkv, dH


def _decode_forward(prefix_tokens, H_e, P, config):
    y = _embed_forward(prefix_tokens, P)
    blocks = []
    for l in range(config.L_dec):
        y, c = _decoder_block_forward(y, H_e, P, f"dec.{l}", config)
        blocks.append(c)
    logits = matmul(y, P["out.w"]) + P["out.b"]
    return logits, dict(tokens=prefix_tokens, blocks=blocks, y=y)


def _decode_backward(dlogits, cache, P, config, grads):
    y = cache["y"]
    grads["out.w"] = matmul(y.reshape(-1, y.shape[-1]).T, dlogits.reshape(-1, dlogits.shape[-1]))
    grads["out.b"] = dlogits.sum(axis=(0, 1))
    dy = matmul(dlogits, P["out.w"].T)
    dH = 0.0
    for l in range(config.L_dec - 1, -1, -1):
        dy, dh = _decoder_block_backward(dy, cache["blocks"][l], P, f"dec.{l}", grads)
        dH = dH + dh
    _embed_backward(dy, cache["tokens"], P, grads)
    return dH


def encode(tokens, params: ModelParams, config: ModelConfig):
    """Encoder states after the CoT module; returns ``(H_e, trace)``."""
    tokens = _check_tokens(tokens, config.V)
    H_e, cache = _encode_forward(tokens, params.tensors, config)
    return H_e, cache["trace"]


def decoder_logits(prefix, H_e, params: ModelParams, config: ModelConfig):
    """Output logits for every prefix position, shape ``(B, N_d, V)``."""
    prefix = _check_tokens(prefix, config.V)
    if prefix.shape[1] == 0:
        raise ValueError("decoder prefix must hold at least one token")
    logits, _ = _decode_forward(prefix, H_e, params.tensors, config)
    return logits


def decode_step(prefix, H_e, params: ModelParams, config: ModelConfig):
    """Sparsemax next-token distribution after ``prefix``, shape ``(B, V)``."""
    logits = decoder_logits(prefix, H_e, params, config)
    p, _ = sparsemax_rows(logits[:, -1])
    return p


def greedy_decode_batch(prompts, max_len: int, params: ModelParams, config: ModelConfig):
    """Greedy decoding for a batch; finished rows are padded with the end token."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prompts = _check_tokens(prompts, config.V)
    H_e, _ = encode(prompts, params, config)
    B = prompts.shape[0]
    prefix = np.full((B, 1), config.start_token, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    out = []
    for _ in range(max_len):
        probs = decode_step(prefix, H_e, params, config)
        nxt = np.where(done, config.end_token, probs.argmax(axis=-1))
        out.append(nxt)
        done |= nxt == config.end_token
        if done.all():
            break
        prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return np.stack(out, axis=1)


def greedy_decode(prompt, max_len: int, params: ModelParams, config: ModelConfig) -> list[int]:
    """Greedy decode of a single prompt; the end token is not included."""
    seq = greedy_decode_batch(np.asarray(prompt)[None, :], max_len, params, config)[0]
    result = []
    for tok in seq:
        if tok == config.end_token:
            break
        result.append(int(tok))
    return result


def loss_and_grads(params: ModelParams, config: ModelConfig, src, tgt_in, tgt_out,
                   need_grads: bool = True):
    """Mean sparsemax loss over all target positions, with teacher forcing."""
    P = params.tensors
    src = _check_tokens(src, config.V)
    tgt_in = _check_tokens(tgt_in, config.V)
    tgt_out = np.asarray(tgt_out)
    H_e, enc_cache = _encode_forward(src, P, config)
    logits, dec_cache = _decode_forward(tgt_in, H_e, P, config)
    losses, dlogits = sparsemax_loss_rows(logits, tgt_out)
    count = losses.size
    loss = float(losses.sum() / count)
    if not need_grads:
        return loss, None
    grads: dict[str, np.ndarray] = {}
    dH = _decode_backward(dlogits / count, dec_cache, P, config, grads)
    _encode_backward(dH, enc_cache, P, config, grads)
    return loss, grads


def activation_signature(params: ModelParams, config: ModelConfig, src, tgt_in) -> str:
    """Digest of the discrete state of a forward pass: sparsemax supports,
    rectifier signs, dynamic and CoT masks. Finite differences are only valid
    where this does not change."""
    P = params.tensors
    src = _check_tokens(src, config.V)
    tgt_in = _check_tokens(tgt_in, config.V)
    H_e, enc_cache = _encode_forward(src, P, config)
    logits, dec_cache = _decode_forward(tgt_in, H_e, P, config)
    digest = hashlib.sha256()

    def attn(c):
        digest.update((c["P"] > 0).tobytes())
        for m in c["masks"]:
            digest.update(m.values.tobytes())

    def relu(u, ffn: FeedForwardParams):
        digest.update((matmul(u, ffn.w1) + ffn.b1 > 0).tobytes())

    for l, c in enumerate(enc_cache["blocks"]):
        attn(c["attn"])
        relu(c["u"], _ffn(P, f"enc.{l}.ffn"))
    for c in enc_cache["cot"]:
        attn(c["attn"])
        relu(c["u"], c["params"].ffn)
        digest.update(c["mask"].tobytes())
    for l, c in enumerate(dec_cache["blocks"]):
        attn(c["self_attn"])
        attn(c["cross_attn"])
        relu(c["u"], _ffn(P, f"dec.{l}.ffn"))
    digest.update((sparsemax_rows(logits)[0] > 0).tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------- toy tasks

TASKS = ("copy", "reverse")


def make_batch(task: str, config: ModelConfig, n: int, batch_size: int, rng):
    """Random ``(src, tgt_in, tgt_out)``; content tokens are ``0 .. V-3``."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; choose from {TASKS}")
    if config.V < 3:
        raise ConfigError("toy tasks need V >= 3 (content, start and end tokens)")
    src = rng.integers(0, config.V - 2, size=(batch_size, n))
    body = src if task == "copy" else src[:, ::-1]
    end = np.full((batch_size, 1), config.end_token)
    start = np.full((batch_size, 1), config.start_token)
    tgt_out = np.concatenate([body, end], axis=1)
    tgt_in = np.concatenate([start, body], axis=1)
    return src, tgt_in, tgt_out


def batch_rng(seed: int, step: int):
    return np.random.default_rng([seed, 7919, step])


@dataclass
class TrainResult:
    losses: list[float]
    params: ModelParams
    steps_done: int


def train_toy(task: str, config: ModelConfig, steps: int, lr: float, seq_len: int = 8,
              batch_size: int = 16, params: ModelParams | None = None, start_step: int = 0,
              min_len: int | None = None, log_every: int = 0) -> TrainResult:
    """Plain gradient descent on a toy sequence task.

    ``losses[i]`` is the loss at step ``start_step + i`` before its update.
    Batches depend only on (seed, step), so resumed runs continue the curve.
    With ``min_len`` set, each step draws its sequence length from
    ``[min_len, seq_len]``.
    """
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    if lr < 0:
        raise ConfigError("learning rate must be >= 0")
    if min_len is not None and not 1 <= min_len <= seq_len:
        raise ConfigError(f"min_len must lie in [1, {seq_len}]")
    params = init_params(config) if params is None else params.copy()
    names = params.trainable_names()
    losses = []
    for step in range(start_step, start_step + steps):
        rng = batch_rng(config.seed, step)
        n = seq_len if min_len is None else int(rng.integers(min_len, seq_len + 1))
        src, tgt_in, tgt_out = make_batch(task, config, n, batch_size, rng)
        loss, grads = loss_and_grads(params, config, src, tgt_in, tgt_out)
        if not np.isfinite(loss):
            raise TrainingError(step)
        losses.append(loss)
        if lr:
            for name in names:
                params.tensors[name] -= lr * grads[name]
        if log_every and (step + 1) % log_every == 0:
            log.info("step %d loss %.6f", step + 1, loss)
    return TrainResult(losses, params, start_step + steps)


def evaluate_task(task: str, params: ModelParams, config: ModelConfig, seq_len: int = 8,
                  n_seqs: int = 50, seed: int = 12345) -> float:
    """Fraction of content tokens greedy decoding reproduces on fresh sequences."""
    src, _, tgt_out = make_batch(task, config, seq_len, n_seqs, np.random.default_rng(seed))
    pred = greedy_decode_batch(src, seq_len + 1, params, config)
    width = min(pred.shape[1], seq_len)
    hits = (pred[:, :width] == tgt_out[:, :width]).sum()
    return float(hits / (n_seqs * seq_len))
