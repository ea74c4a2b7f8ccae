"""Desk-scale end-to-end run: render the corpus, train, report per epoch.

    python3 scripts/run_end_to_end.py --out runs/e2e --epochs 30
"""

import argparse
import logging
from pathlib import Path

from markgan.evaluation import classify_accuracy, deblur_decimate_report
from markgan.experiments import end_to_end
from markgan.pipeline import TrainConfig, save_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/e2e"))
    ap.add_argument("--corpus", type=Path, default=Path("runs/corpus"))
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eval-every", type=int, default=1, help="0 disables per-epoch scoring")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)

    def progress(state, summ, elapsed, test):
        line = f"epoch {summ.epoch:2d}  t={elapsed:6.0f}s  train_recon={summ.recon_error:.5f}"
        if args.eval_every and (summ.epoch + 1) % args.eval_every == 0:
            acc = classify_accuracy(state, test).overall
            r = deblur_decimate_report(state, test)
            line += (f"  acc={acc:.4f}  gap={r.deblur_gap:+.5f}  "
                     f"ratio={r.decimation_ratio:.2f}")
        print(line, flush=True)

    res = end_to_end(args.corpus, TrainConfig(epochs=args.epochs, seed=args.seed),
                     progress=progress)
    save_checkpoint(res.state, args.out / "state.amk")
    (args.out / "metrics.tsv").write_text(res.metric_tsv)
    r = res.report
    print(f"accuracy {res.accuracy:.4f}; deblur gap {r.deblur_gap:+.5f}; "
          f"negatives/positives recon {r.decimation_ratio:.2f}; "
          f"train recon last/first {res.recon_ratio:.3f}; train time {res.seconds:.0f}s")
    for c, a in res.per_class.items():
        print(f"  {c:8s} {a:.3f}")


if __name__ == "__main__":
    main()
