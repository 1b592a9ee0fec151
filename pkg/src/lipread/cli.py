"""Command-line entry points: generate, train, eval, extract.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as D
from . import features as F
from .ctc import Alphabet
from .network import CheckpointError, NetworkConfig, build_network, load_checkpoint, model_from_checkpoint
from .training import TrainConfig, TrainingError, evaluate, make_alphabet, save_report, train

log = logging.getLogger("lipread")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SILENCE = "<sil>"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _fraction(text):
    try:
        value = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a rational number: {text!r}") from None
    if value <= 0:
        raise argparse.ArgumentTypeError("scale must be positive")
    return value


def _positive_int(text):
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _rate(text):
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return value


# ---------------------------------------------------------------------------
# generate


def cmd_generate(args):
    if args.grammar != "grid":
        raise UsageError(f"unknown grammar {args.grammar!r}")
    homophemes = D.make_homopheme_map(D.GRID, args.homopheme_rate, seed=args.seed)
    config = D.RenderConfig(noise=args.noise, homopheme_map=homophemes)
    # seen-style split: both splits draw from the same speakers
    splits = {
        "train": D.synthetic_corpus(args.num_train, D.GRID, config, args.seed, args.speakers, prefix="train"),
        "test": D.synthetic_corpus(args.num_test, D.GRID, config, args.seed, args.speakers, prefix="test"),
    }
    out = Path(args.out)
    D.save_dataset(out, splits)
    (out / "homophemes.json").write_text(json.dumps(homophemes, sort_keys=True, indent=1) + "\n",
                                         encoding="utf-8")
    groups = len(set(homophemes.values()))
    print(f"wrote {out / D.MANIFEST}")
    for name, samples in splits.items():
        print(f"  {name}: {len(samples)} clips, {len({s.speaker for s in samples})} speakers")
    print(f"  homopheme collisions: {len(homophemes)} of {len(D.GRID.vocabulary)} words "
          f"in {groups} glyph groups")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    dataset = D.load_dataset(args.data, split=args.split)
    if not dataset:
        raise D.DatasetError(f"no {args.split!r} samples in {args.data}")
    val = D.load_dataset(args.data, split=args.val_split) if args.val_split else None
    out = Path(args.out)
    resume = None
    if args.resume:
        if not out.exists():
            raise CheckpointError(f"--resume given but {out} does not exist")
        resume = load_checkpoint(out)
        alphabet = Alphabet.from_descriptor(resume.alphabet)
        model = build_network(resume.config)
    else:
        mode = "char" if args.label_mode == "char" else "word"
        alphabet = make_alphabet(mode, [s.transcript for s in dataset])
        model = build_network(NetworkConfig(len(alphabet), width_scale=args.scale), seed=args.seed)
    config = TrainConfig(learning_rate=args.lr, batch_size=args.batch, max_epochs=args.epochs, seed=args.seed,
                         label_mode="word" if alphabet.mode == "word" else "char",
                         curriculum=args.curriculum, clip_norm=args.clip_norm, patience=args.patience)
    log_path = args.log or str(out) + ".log.jsonl"
    if not args.resume:
        Path(log_path).write_text("", encoding="utf-8")
    result = train(model, dataset, config, alphabet, val, out=out, log_path=log_path, resume=resume)
    last = [r for r in result.curve if r["split"] == "train"][-1]
    print(f"trained {result.epochs_run} epochs, final train loss {last['loss']:.4f}; "
          f"{len(alphabet)} labels ({alphabet.mode}); checkpoint {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _checked_alphabet(ckpt, samples):
    if not ckpt.alphabet:
        raise CheckpointError("checkpoint has no alphabet descriptor")
    alphabet = Alphabet.from_descriptor(ckpt.alphabet)
    if len(alphabet) != ckpt.config.label_count:
        raise CheckpointError(f"alphabet has {len(alphabet)} labels but the network outputs "
                              f"{ckpt.config.label_count}")
    for s in samples:
        try:
            alphabet.encode(s.transcript)
        except KeyError as exc:
            raise CheckpointError(f"alphabet mismatch on sample {s.id!r}: {exc.args[0]}") from None
    return alphabet


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    samples = D.load_dataset(args.data, split=args.split)
    if not samples:
        raise D.DatasetError(f"no {args.split!r} samples in {args.data}")
    alphabet = _checked_alphabet(ckpt, samples)
    model = model_from_checkpoint(ckpt)
    report = evaluate(model, samples, alphabet, beam_width=args.beam, spell=args.spell_correct)
    print(report.summary())
    if args.report:
        save_report(args.report, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# extract


def _frame_labels(sample, classes):
    labels = np.full(sample.num_frames, classes[SILENCE], dtype=np.int64)
    if sample.word_spans is None:
        raise D.DatasetError(f"sample {sample.id!r} has no word spans for LDA labels")
    for (start, end), word in zip(sample.word_spans, sample.transcript):
        labels[start:end] = classes[word]
    return labels


def cmd_extract(args):
    samples = D.load_dataset(args.data, split=args.split)
    if not samples:
        raise D.DatasetError(f"no samples in {args.data}")
    if args.kind == "dct":
        items = [(s.id, F.clip_dct_features(s.frames).frames) for s in samples]
    else:
        if not args.ckpt:
            raise UsageError(f"--kind {args.kind} needs --ckpt")
        model = model_from_checkpoint(load_checkpoint(args.ckpt))
        feats = [model.bottleneck(s.frames) for s in samples]
        if args.kind == "bottleneck":
            items = [(s.id, f) for s, f in zip(samples, feats)]
        else:
            # word identity per frame (plus silence) stands in for HMM state labels
            classes = {w: k for k, w in enumerate(D.GRID.vocabulary + [SILENCE])}
            lda = F.fit_hybrid_lda(feats, [_frame_labels(s, classes) for s in samples])
            F.save_lda(args.lda_out or str(args.out) + ".lda", lda)
            items = [(s.id, F.hybrid_prep(f, lda).frames) for s, f in zip(samples, feats)]
    F.write_archive(args.out, items)
    dims = {a.shape[1] for _, a in items}
    print(f"wrote {len(items)} utterances ({args.kind}, D={','.join(map(str, sorted(dims)))}) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="lipread", description="3D-2D-CNN-BLSTM lipreading pipeline")
    parser.add_argument("--threads", type=_positive_int, default=None, help="cap BLAS worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic Grid-grammar dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num-train", type=int, default=200)
    g.add_argument("--num-test", type=int, default=50)
    g.add_argument("--grammar", default="grid", choices=["grid"])
    g.add_argument("--homopheme-rate", type=_rate, default=0.0)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--speakers", type=_positive_int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train with CTC")
    t.add_argument("--data", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--val-split", default=None)
    t.add_argument("--label-mode", choices=["char", "word"], default="char")
    t.add_argument("--scale", type=_fraction, default=Fraction(1))
    t.add_argument("--epochs", type=_positive_int, default=40)
    t.add_argument("--curriculum", action="store_true")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch", type=_positive_int, default=32)
    t.add_argument("--clip-norm", type=float, default=None)
    t.add_argument("--patience", type=_positive_int, default=5)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None, help="JSON-lines loss log (default: <out>.log.jsonl)")
    t.add_argument("--resume", action="store_true", help="continue from the checkpoint at --out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="decode and score a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--beam", type=_positive_int, default=200)
    e.add_argument("--spell-correct", action=argparse.BooleanOptionalAction, default=True)
    e.add_argument("--report", default=None, help="write the full report as JSON")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("extract", help="write bottleneck, DCT or final hybrid features")
    x.add_argument("--ckpt", default=None)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default=None)
    x.add_argument("--kind", choices=["bottleneck", "dct", "final"], required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--lda-out", default=None, help="where to store the fitted LDA (final only)")
    x.set_defaults(func=cmd_extract)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lipread: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DatasetError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"lipread: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
