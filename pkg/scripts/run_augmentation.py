"""Class-consistency of the MI-trained augmenter against its lambda_mi = 0 twin.

    python3 scripts/run_augmentation.py --corpus runs/corpus --epochs 10 --seeds 0 1 2
"""

import argparse
import logging
from pathlib import Path

from markgan.corpus import CLASSES, load_samples
from markgan.experiments import augmentation_study, ensure_corpus
from markgan.pipeline import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--corpus", type=Path, default=Path("runs/corpus"))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--per-class", type=int, default=100)
    ap.add_argument("--out", type=Path, default=Path("runs/augmentation.tsv"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train = load_samples(ensure_corpus(args.corpus).split("train"))
    runs = augmentation_study(train, args.seeds, TrainConfig(epochs=args.epochs), args.per_class)
    lines = ["seed\tvariant\tmean\t" + "\t".join(CLASSES) + "\tL_I_first\tL_I_last"]
    for r in runs:
        for v in ("mi", "vanilla"):
            c = r.consistency[v]
            lines.append(f"{r.seed}\t{v}\t{r.mean(v):.4f}\t"
                         + "\t".join(f"{c[k]:.3f}" for k in CLASSES)
                         + f"\t{r.loss_mi[v][0]:.4f}\t{r.loss_mi[v][-1]:.4f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
