"""Command-line entry point.

Exit codes: 0 success, 1 a check failed, 2 usage or configuration error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .cost import reduction_ratio, run_sweep
from .cot import trace_csv
from .errors import (
    CheckpointError, ConfigError, DimensionError, OracleSizeError, SparseCotError, TrainingError,
    VocabularyError,
)
from .gradcheck import THRESHOLDS, grad_check, make_probe
from .masking import parse_pattern_list
from .model import (
    ModelConfig, ModelParams, encode, evaluate_task, greedy_decode, init_params, make_batch,
    train_toy,
)
from .oracles import dense_limit_suite, pair_count_suite, sparsemax_oracle_suite
from .plotting import cost_curve_svg, loss_curve_svg
from .storage import atomic_write

log = logging.getLogger("sparsecot")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

DEFAULT_CONFIGS = {
    "bench": ModelConfig(V=16, D=32, H=4, T=0, alpha=1.0),
    "gradcheck": ModelConfig(V=8, D=8, H=2, T=2, alpha=0.75,
                             enc_pattern="window:w=2", dec_self_pattern="topk:k=2+causal"),
    "train-toy": ModelConfig(V=16, D=32, H=2, alpha=0.75, enc_pattern="window:w=4",
                             dec_self_pattern="window:w=4,causal"),
    "decode": ModelConfig(V=16, D=32, H=2, alpha=0.75, enc_pattern="window:w=4",
                          dec_self_pattern="window:w=4,causal"),
}


class UsageError(SparseCotError):
    pass


class OutputError(SparseCotError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _threads() -> int:
    raw = os.environ.get("SPARSE_COT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"SPARSE_COT_THREADS must be an integer, got {raw!r}") from None


def _config(args) -> ModelConfig:
    cfg = ModelConfig.load(args.config) if args.config else DEFAULT_CONFIGS[args.command]
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _config_beside(args, checkpoint):
    # a checkpoint written by train-toy sits next to the config that produced it
    if not args.config:
        candidate = Path(checkpoint).with_name("config.txt")
        args.config = str(candidate) if candidate.exists() else None


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OutputError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise OutputError(f"output directory {out} is not writable")
    return out


def _write(path: Path, data):
    try:
        atomic_write(path, data)
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from None


def cmd_bench(args) -> int:
    cfg = _config(args)
    specs = parse_pattern_list(args.pattern)
    sweep = args.sweep
    if any(b <= a for a, b in zip(sweep, sweep[1:])):
        raise UsageError("--sweep values must be strictly increasing")
    out = _out_dir(args.out)
    report = run_sweep(specs, sweep, D=cfg.D, H=cfg.H, seed=cfg.seed, threads=_threads())
    _write(out / "cost.csv", report.to_csv())
    _write(out / "cost.svg", cost_curve_svg(report))
    for pattern in report.patterns():
        n, pairs = report.series(pattern)
        slope = f"{report.slope(pattern):.4f}" if len(n) >= 4 else "n/a"
        print(f"{pattern}: pairs@n={n[-1]}={pairs[-1]} log-log slope={slope}")
        spec = specs[report.patterns().index(pattern)]
        if spec.kind not in ("full", "causal"):
            dense = "causal" if spec.causal else "full"
            print(f"  reduction vs {dense} at n={sweep[-1]}: {reduction_ratio(spec, sweep[-1]):.4f}")
    print(f"wrote {out / 'cost.csv'} and {out / 'cost.svg'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    params = init_params(cfg)
    probe = make_probe(cfg, seq_len=args.seq_len, seed=cfg.seed)
    report = grad_check(params, cfg, probe, coords_per_tensor=args.coords, seed=cfg.seed)
    thresholds = dict(THRESHOLDS)
    if args.threshold is not None:
        thresholds = {k: args.threshold for k in thresholds}
    lines = []
    for path in sorted(report.errors):
        err, tol = report.errors[path], thresholds.get(path, 1e-5)
        status = "PASS" if err < tol else "FAIL"
        lines.append(f"{status} {path}: max_rel_error={err:.3e} threshold={tol:.0e} "
                     f"coords={report.checked[path]}")
    lines.append(f"masked embedding dims max |grad| = {report.masked_embedding_grad!r}")
    lines.append(f"boundary coordinates resampled: {report.skipped}")
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        _write(_out_dir(args.out) / "gradcheck.txt", text)
    failed = report.failures(thresholds) or report.masked_embedding_grad != 0.0
    return EXIT_CHECK if failed else EXIT_OK


def _load_params(path, cfg) -> tuple[ModelParams, int]:
    try:
        params, step = ModelParams.load(path)
    except OSError as exc:
        raise OutputError(f"cannot read checkpoint {path}: {exc}") from None
    expected = {k: v.shape for k, v in init_params(cfg).tensors.items()}
    got = {k: v.shape for k, v in params.tensors.items()}
    if got != expected:
        raise CheckpointError(f"checkpoint {path} does not match the model config")
    return params, step


def _loss_csv(losses, start) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss"])
    for i, loss in enumerate(losses):
        w.writerow([start + i, repr(float(loss))])
    return buf.getvalue()


def cmd_train_toy(args) -> int:
    out = _out_dir(args.out)
    if args.resume:
        _config_beside(args, args.resume)
        cfg = _config(args)
        params, start = _load_params(args.resume, cfg)
    else:
        cfg = _config(args)
        params, start = init_params(cfg), 0
    result = train_toy(args.task, cfg, args.steps, args.lr, seq_len=args.seq_len,
                       batch_size=args.batch_size, params=params, start_step=start,
                       min_len=args.min_len, log_every=args.log_every)
    _write(out / "config.txt", cfg.to_text())
    try:
        result.params.save(out / "model.ckpt", step=result.steps_done)
    except OSError as exc:
        raise OutputError(f"cannot write checkpoint: {exc}") from None
    if result.losses:
        _write(out / "loss.csv", _loss_csv(result.losses, start))
        _write(out / "loss.svg", loss_curve_svg(result.losses, start))
        print(f"steps {start}..{result.steps_done - 1}: loss {result.losses[0]:.6f} -> "
              f"{result.losses[-1]:.6f}")
    src, _, _ = make_batch(args.task, cfg, args.seq_len, 8, np.random.default_rng([cfg.seed, 99]))
    _, trace = encode(src, result.params, cfg)
    _write(out / "cot_trace.csv", trace_csv(trace))
    if args.eval:
        acc = evaluate_task(args.task, result.params, cfg, seq_len=args.seq_len,
                            n_seqs=args.eval)
        print(f"greedy token accuracy on {args.eval} held-out sequences: {acc:.4f}")
    print(f"wrote {out / 'model.ckpt'} (step {result.steps_done})")
    return EXIT_OK


def cmd_oracle(args) -> int:
    results = [
        sparsemax_oracle_suite(cases=args.cases, max_n=args.max_n, seed=args.seed or 0),
        pair_count_suite(max_seq=args.max_seq, seed=args.seed or 0),
        dense_limit_suite(cases=args.dense_cases, seed=args.seed or 0),
    ]
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK


def cmd_decode(args) -> int:
    _config_beside(args, args.checkpoint)
    cfg = _config(args)
    params, _ = _load_params(args.checkpoint, cfg)
    out = greedy_decode(args.tokens, args.max_len, params, cfg)
    print(",".join(str(t) for t in out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsecot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="key=value model config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("bench", help="attention cost sweep -> cost.csv + cost.svg")
    common(p, out_required=True)
    p.add_argument("--pattern", default="full,window:w=8,causal",
                   help="pattern specs, comma or ';' separated")
    p.add_argument("--sweep", type=_int_list, default=[64, 128, 256, 512])
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    p.add_argument("--threshold", type=float, help="one threshold for every path")
    p.add_argument("--coords", type=int, default=3, help="coordinates per tensor")
    p.add_argument("--seq-len", type=int, default=4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="train on a toy copy/reverse task")
    common(p, out_required=True)
    p.add_argument("--task", choices=("copy", "reverse"), default="copy")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.2)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=8)
    p.add_argument("--min-len", type=int, help="draw lengths from [min-len, seq-len]")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eval", type=int, default=0, metavar="N",
                   help="report greedy accuracy on N held-out sequences")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("oracle", help="run oracle equivalence suites")
    p.add_argument("--seed", type=int)
    p.add_argument("--cases", type=int, default=1000)
    p.add_argument("--max-n", type=int, default=10, help="largest sparsemax oracle input")
    p.add_argument("--max-seq", type=int, default=64, help="largest mask size for pair counts")
    p.add_argument("--dense-cases", type=int, default=50)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("decode", help="greedy-decode a token sequence with a checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", type=_int_list, required=True)
    p.add_argument("--max-len", type=int, default=16)
    p.set_defaults(func=cmd_decode)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OracleSizeError, ConfigError, UsageError, CheckpointError, VocabularyError,
            DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
