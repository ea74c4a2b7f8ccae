"""Command-line entry point: ``python3 -m markgan <subcommand> ...``.

Exit codes: 0 success, 1 usage error (usage text on stderr), 2 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .corpus import (AUGMENTED_COUNTS, CLASSES, TABLE_I_COUNTS, CorpusError, ingest_external,
                     load_samples, make_corpus, scaled_counts)
from .evaluation import (EvalError, augmentation_consistency, classify_accuracy,
                         deblur_decimate_report, dump_triptychs, run_ablation,
                         train_reference_classifier)
from .gradcheck import run_gradcheck
from .losses import NonFiniteLossError
from .pipeline import (TrainState, load_checkpoint, load_config, produce_augmented_set,
                       save_checkpoint, train_augmenter, train_main)

log = logging.getLogger("markgan")

STATE_FILE = "state.amk"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", type=Path, help="file of 'key = value' lines")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="markgan", description="deblur-and-classify GAN for road-marking glyphs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic corpus")
    _common(p)
    p.add_argument("--scale", type=float, default=1.0, help="multiply the per-class counts")

    p = sub.add_parser("train", help="train the deblur/classify GAN")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("train-aug", help="train the augmentation generator")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--resume", type=Path)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda-mi", type=float, dest="lambda_mi")

    p = sub.add_parser("augment", help="write an augmented set from a trained augmenter")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scale", type=float, default=1.0)

    p = sub.add_parser("eval", help="accuracy, deblur/decimate report and triptychs")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--augmented", type=Path, help="augmented corpus to score for consistency")
    p.add_argument("--dump", type=int, default=16, help="number of triptychs to write")

    p = sub.add_parser("ablate", help="train and score the four ablation variants")
    _common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--aug-scale", type=float, default=1.0, dest="aug_scale")

    p = sub.add_parser("gradcheck", help="finite-difference check of every model gradient")
    _common(p, out_required=False)
    p.add_argument("--coords", type=int, default=8,
                   help="random coordinates per tensor; 0 checks every element")
    return parser


def _config(args, **extra):
    overrides = {"seed": args.seed, "epochs": getattr(args, "epochs", None)}
    overrides.update(extra)
    return load_config(args.config, **overrides)


def _resume(args, cfg):
    if args.resume is None:
        return None
    st = load_checkpoint(args.resume)
    return TrainState(st.models, st.optim, cfg, st.epoch, st.aug_epoch)


def _write_tsv(path: Path, rows) -> None:
    path.write_text("".join("\t".join(str(v) for v in r) + "\n" for r in rows), encoding="utf-8")


def cmd_gen_data(args) -> None:
    cfg = _config(args)
    counts = TABLE_I_COUNTS if args.scale == 1.0 else scaled_counts(args.scale)
    index = make_corpus(counts, seed=cfg.seed, out_dir=args.out)
    print(f"wrote {len(index)} images to {args.out}")


def cmd_train(args) -> None:
    cfg = _config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    state, mlog = train_main(ingest_external(args.corpus), cfg, state=_resume(args, cfg))
    save_checkpoint(state, args.out / STATE_FILE)
    mlog.write(args.out / "metrics.tsv")
    last = mlog.epochs[-1] if mlog.epochs else None
    if last:
        print(f"epoch {last.epoch}: recon={last.recon_error:.5f} stopped={last.stopped}")


def cmd_train_aug(args) -> None:
    cfg = _config(args, lambda_mi=args.lambda_mi)
    args.out.mkdir(parents=True, exist_ok=True)
    state, mlog = train_augmenter(ingest_external(args.corpus), cfg, state=_resume(args, cfg))
    save_checkpoint(state, args.out / STATE_FILE)
    mlog.write(args.out / "aug_metrics.tsv")
    for e in mlog.epochs:
        print(f"aug epoch {e.epoch}: L_I={e.loss_mi:.4f} H(c)={e.code_entropy:.4f}")


def cmd_augment(args) -> None:
    cfg = _config(args)
    counts = AUGMENTED_COUNTS if args.scale == 1.0 else scaled_counts(args.scale, AUGMENTED_COUNTS)
    index = produce_augmented_set(load_checkpoint(args.checkpoint), counts, args.out, cfg.seed)
    print(f"wrote {len(index)} augmented images to {args.out}")


def cmd_eval(args) -> None:
    cfg = _config(args)
    state = load_checkpoint(args.checkpoint)
    corpus = ingest_external(args.corpus)
    split = load_samples(corpus.split(args.split))
    args.out.mkdir(parents=True, exist_ok=True)
    acc = classify_accuracy(state, split)
    rep = deblur_decimate_report(state, split)
    rows = [("metric", "value")]
    rows += [(f"accuracy_{c}", repr(a)) for c, _, a in acc.as_rows()]
    rows += [("deblur_gap", repr(rep.deblur_gap)), ("decimate_score", repr(rep.decimate_score)),
             ("positive_recon", repr(rep.positive_recon)),
             ("decimation_ratio", repr(rep.decimation_ratio)),
             ("psnr_corrupted", repr(rep.psnr_corrupted)),
             ("psnr_deblurred", repr(rep.psnr_deblurred))]
    if args.augmented is not None:
        ref = train_reference_classifier(load_samples(corpus.split("train")), seed=cfg.seed)
        cons = augmentation_consistency(ingest_external(args.augmented), ref)
        rows += [(f"consistency_{c}", repr(cons[c])) for c in CLASSES]
    _write_tsv(args.out / "report.tsv", rows)
    dump_triptychs(state, split, args.out / "triptychs", limit=args.dump)
    print(f"accuracy={acc.overall:.4f} deblur_gap={rep.deblur_gap:.5f} "
          f"decimation_ratio={rep.decimation_ratio:.2f}")


def cmd_ablate(args) -> None:
    cfg = _config(args)
    corpus = ingest_external(args.corpus)
    aug_counts = (AUGMENTED_COUNTS if args.aug_scale == 1.0
                  else scaled_counts(args.aug_scale, AUGMENTED_COUNTS))
    res = run_ablation(load_samples(corpus.split("train")), load_samples(corpus.split("test")),
                       cfg, aug_counts)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "ablation.tsv").write_text(res.to_tsv(), encoding="utf-8")
    sys.stdout.write(res.to_tsv())


def cmd_gradcheck(args) -> None:
    cfg = _config(args)
    rep = run_gradcheck(seed=cfg.seed, coords=args.coords or None)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "gradcheck.tsv").write_text(rep.to_tsv(), encoding="utf-8")
    print(f"max relative error {rep.max_rel_error:.3e} over {len(rep.entries)} tensors "
          f"in {rep.seconds:.1f}s")
    if not rep.passed():
        raise GradCheckFailed(f"max relative error {rep.max_rel_error:.3e} >= 1e-3")


class GradCheckFailed(RuntimeError):
    pass


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "train-aug": cmd_train_aug,
            "augment": cmd_augment, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}

RUNTIME_ERRORS = (CorpusError, CheckpointError, EvalError, NonFiniteLossError, GradCheckFailed,
                  ValueError, OSError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "markgan: error: a subcommand is required\n")
    except UsageError as e:
        sys.stderr.write(str(e))
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except RUNTIME_ERRORS as e:
        sys.stderr.write(f"markgan {args.command}: {type(e).__name__}: {e}\n")
        return 2
    return 0
