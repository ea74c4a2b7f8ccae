"""Ablation over seeds: full model vs no deblurring, no classification loss, no augmentation.

    python3 scripts/run_ablation.py --scale 0.1 --epochs 30 --seeds 0 1 2
"""

import argparse
import logging
from pathlib import Path

from markgan.corpus import AUGMENTED_COUNTS, load_samples, make_corpus, scaled_counts
from markgan.evaluation import ABLATION_VARIANTS
from markgan.experiments import ablation_study
from markgan.pipeline import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--scale", type=float, default=0.1, help="fraction of the default counts")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--aug-epochs", type=int, default=30)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    index = make_corpus(scaled_counts(args.scale), seed=0, out_dir=args.out / "corpus")
    train = load_samples(index.split("train"))
    test = load_samples(index.split("test"))
    results = ablation_study(train, test, args.seeds, TrainConfig(epochs=args.epochs),
                             scaled_counts(args.scale, AUGMENTED_COUNTS),
                             TrainConfig(epochs=args.aug_epochs))
    lines = ["seed\t" + "\t".join(ABLATION_VARIANTS)]
    for s, r in zip(args.seeds, results):
        lines.append(f"{s}\t" + "\t".join(f"{r.accuracy(v):.4f}" for v in ABLATION_VARIANTS))
    (args.out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
