"""Command-line entry point: ``posforest <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import corpus as corp
from .errors import PosForestError
from .forest import encode_forest, expression_complexity, stratify
from .lexer import Vocabulary, normalize, tokenize
from .metrics import evaluate
from .model import ModelConfig, ModelParams, greedy_decode_ids
from .training import (
    TrainConfig,
    grad_check,
    load_checkpoint,
    make_batch,
    save_checkpoint,
    train,
    write_loss_csv,
)

log = logging.getLogger("posforest")

COMMANDS = ("encode", "targets", "complexity", "split", "gen", "render", "train-toy", "decode", "eval", "gradcheck")


class UsageError(Exception):
    """Bad flag combination; reported with exit code 2."""


def _add_common(p):
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--omega", default=None, help="comma list overriding the structure set")
    p.add_argument("--dict", dest="dictionary", default=None, help="dictionary file (default: bundled)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posforest", description="Position-forest tools for LaTeX expressions.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        return p

    p = cmd("encode", "print per-token identifiers")
    p.add_argument("--expr")
    p.add_argument("--corpus")
    p.add_argument("--max-nesting", type=int, default=3)

    p = cmd("targets", "write the targets TSV for a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-nesting", type=int, default=3)

    p = cmd("complexity", "print the nesting level of each expression")
    p.add_argument("--expr")
    p.add_argument("--corpus")
    p.add_argument("--max-nesting", type=int, default=None, help="default: unbounded")

    p = cmd("split", "write one sub-corpus per nesting level (N1.tsv, N2.tsv, ...)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--max-nesting", type=int, default=None)

    p = cmd("gen", "sample a synthetic corpus")
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--max-items", type=int, default=3)
    p.add_argument("--max-tokens", type=int, default=24)
    p.add_argument("--out", required=True)

    p = cmd("render", "render a corpus into a glyph-grid sample file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--out", required=True)

    p = cmd("train-toy", "fit the toy decoder; writes a checkpoint and <out>.loss.csv")
    p.add_argument("--corpus", required=True, help="sample file or corpus TSV")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--max-nesting", type=int, default=3)
    p.add_argument("--no-stop", action="store_true", help="run all epochs even after a perfect fit")

    p = cmd("decode", "greedy-decode a corpus and print metrics against it")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="sample file or corpus TSV")
    p.add_argument("--grid", type=int, default=16)
    p.add_argument("--out", help="predictions TSV")
    p.add_argument("--strip-position", action="store_true", help="drop the position branch first")

    p = cmd("eval", "compare prediction and reference TSVs")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)

    p = cmd("gradcheck", "max relative error of analytic vs finite-difference gradients")
    p.add_argument("--corpus", help="corpus TSV (default: generated)")
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--grid", type=int, default=4)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--max-per-tensor", type=int, default=None)
    return parser


def _vocab(args) -> Vocabulary:
    omega = None
    if args.omega is not None:
        omega = [t for t in args.omega.split(",") if t]
        if not omega:
            raise UsageError("--omega: empty structure set")
    return Vocabulary.from_file(args.dictionary, omega) if args.dictionary else Vocabulary.default(omega)


def _inputs(args, vocab):
    if bool(args.expr) == bool(args.corpus):
        raise UsageError("exactly one of --expr / --corpus is required")
    if args.expr is not None:
        return [(None, tokenize(args.expr, vocab))]
    return corp.load_any(args.corpus, vocab)


def _samples(path, vocab, grid, max_nesting=3):
    if corp.is_sample_file(path):
        return corp.read_samples(path, vocab, max_nesting)
    return [(i, corp.render_expression(s, grid, max_nesting)) for i, s in corp.read_corpus(path, vocab)]


def _emit(expr_id, text):
    print(text if expr_id is None else f"{expr_id}\t{text}")


def cmd_encode(args, vocab):
    for expr_id, seq in _inputs(args, vocab):
        seq = normalize(seq)
        ids = encode_forest(seq, args.max_nesting)
        _emit(expr_id, " ".join(f"{t}:{i}" for t, i in zip(seq.texts, ids)))


def cmd_targets(args, vocab):
    corp.write_targets(args.out, corp.load_any(args.corpus, vocab), args.max_nesting)


def cmd_complexity(args, vocab):
    for expr_id, seq in _inputs(args, vocab):
        _emit(expr_id, str(expression_complexity(encode_forest(normalize(seq), args.max_nesting))))


def cmd_split(args, vocab):
    entries = corp.load_any(args.corpus, vocab)
    buckets = stratify([normalize(s) for _, s in entries], args.max_nesting)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for level, idx in buckets.items():
        corp.write_corpus(out / f"N{level}.tsv", [entries[i] for i in idx])
        print(f"N{level}\t{len(idx)}")


def cmd_gen(args, vocab):
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    cfg = corp.GrammarConfig(
        max_depth=args.depth, seed=args.seed, max_items=args.max_items,
        grid_budget=args.grid, max_tokens=args.max_tokens,
    )
    exprs = corp.generate(cfg, args.count, vocab)
    corp.write_corpus(args.out, [(f"g{i:05d}", e) for i, e in enumerate(exprs)])


def cmd_render(args, vocab):
    entries = corp.read_corpus(args.corpus, vocab)
    samples = []
    for i, (expr_id, seq) in enumerate(entries):
        try:
            samples.append((expr_id, corp.render_expression(seq, args.grid)))
        except PosForestError as exc:
            exc.expression_index = i
            raise
    corp.write_samples(args.out, samples)


def cmd_train(args, vocab):
    samples = [s for _, s in _samples(args.corpus, vocab, args.grid, args.max_nesting)]
    if not samples:
        raise UsageError("--corpus: no expressions")
    cfg = TrainConfig(
        epochs=args.epochs, lr=args.lr, lambda1=args.lambda1, lambda2=args.lambda2, seed=args.seed,
        channels=args.channels, heads=args.heads, layers=args.layers, max_nesting=args.max_nesting,
        stop_on_fit=not args.no_stop,
    )
    result = train(samples, vocab, cfg)
    save_checkpoint(args.out, result.params, vocab, args.seed, {"epochs_to_fit": result.epochs_to_fit})
    write_loss_csv(f"{args.out}.loss.csv", result)
    final = result.exprates[-1][1] if result.exprates else 0.0
    print(f"epochs {len(result.losses)} loss {result.losses[-1][1]:.6f} exprate {final:.6f}")


def cmd_decode(args, vocab):
    params, _ = load_checkpoint(args.checkpoint, vocab)
    if args.strip_position:
        params = params.strip_position_branch()
    pairs = _samples(args.corpus, vocab, args.grid, params.config.max_nesting)
    if not pairs:
        raise UsageError("--corpus: no expressions")
    planes = torch.from_numpy(np.stack([s.grid for _, s in pairs]))
    max_len = max(len(s.latex) for _, s in pairs) + 3
    with torch.no_grad():
        decoded = greedy_decode_ids(planes, params, max_len, vocab.sos_id, vocab.eos_id)
    preds = [[vocab.from_id(i).text for i in ids] for ids in decoded]
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            for (expr_id, _), p in zip(pairs, preds):
                fh.write(f"{expr_id}\t{' '.join(p)}\n")
    print(evaluate(preds, [s.latex.texts for _, s in pairs]).to_json())


def _read_pairs(path, vocab):
    return dict(corp.read_corpus(path, vocab))


def cmd_eval(args, vocab):
    pred, gt = _read_pairs(args.pred, vocab), _read_pairs(args.gt, vocab)
    missing = sorted(set(gt) - set(pred))
    if missing:
        raise UsageError(f"--pred: no prediction for {missing[:3]}")
    print(evaluate([pred[k] for k in gt], [gt[k] for k in gt]).to_json())


def cmd_gradcheck(args, vocab):
    if args.corpus:
        exprs = [s for _, s in corp.read_corpus(args.corpus, vocab)]
    else:
        cfg = corp.GrammarConfig(max_depth=1, seed=args.seed, max_items=2, grid_budget=args.grid, max_tokens=10)
        exprs = corp.generate(cfg, args.count, vocab)
    samples = [corp.render_expression(e, args.grid) for e in exprs]
    batch = make_batch(samples, vocab)
    mcfg = ModelConfig.for_vocab(vocab, batch.planes.shape[-1], channels=args.channels,
                                 heads=args.heads, layers=args.layers)
    params = ModelParams.init(mcfg, seed=args.seed, phi_init="random")
    err = grad_check(params, batch, args.epsilon, args.lambda1, args.lambda2, args.max_per_tensor, args.seed)
    print(f"{err:.6e}")


HANDLERS = {
    "encode": cmd_encode,
    "targets": cmd_targets,
    "complexity": cmd_complexity,
    "split": cmd_split,
    "gen": cmd_gen,
    "render": cmd_render,
    "train-toy": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        vocab = _vocab(args)
        HANDLERS[args.command](args, vocab)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"posforest {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except PosForestError as exc:
        print(f"posforest {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"posforest {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
