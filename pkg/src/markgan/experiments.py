"""Experiments behind the acceptance checks, shared by ``scripts/`` and the tests."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import CLASSES, LabeledSamples, ingest_external, load_samples, make_corpus
from .evaluation import (AblationResult, DeblurReport, augmentation_consistency,
                         classify_accuracy, deblur_decimate_report, run_ablation,
                         train_reference_classifier)
from .losses import adv_loss_discriminator, optimal_discriminator
from .nn import AdamState, ParamSet, adam_step, init_weights
from .pipeline import (EpochSummary, TrainConfig, TrainState, generate_augmented, train_augmenter,
                       train_main)

log = logging.getLogger(__name__)


# ------------------------------------------------------- optimal discriminator


@dataclass
class BinDiscriminatorFit:
    learned: np.ndarray
    optimal: np.ndarray

    @property
    def max_abs_error(self) -> float:
        return float(np.abs(self.learned - self.optimal).max())


def fit_bin_discriminator(pt, pz, steps: int = 600, batch: int = 4096, lr: float = 0.02,
                          hidden: int = 16, seed: int = 0) -> BinDiscriminatorFit:
    """Train a one-hidden-layer discriminator on samples from two distributions over bins.

    Real samples come from ``pt`` and fake ones from ``pz``; the input is the
    one-hot bin index. The learning rate decays linearly to 2% of ``lr`` so the
    final weights average over many minibatches.
    """
    pt, pz = np.asarray(pt, float), np.asarray(pz, float)
    k = len(pt)
    p = ParamSet("discriminator")
    p.add("fc0.weight", (k, hidden))
    p.add("fc0.bias", (hidden,))
    p.add("fc1.weight", (hidden, 1))
    p.add("fc1.bias", (1,))
    init_weights(p, seed, std=0.5)
    opt = AdamState.for_params(p)
    rng = np.random.default_rng([seed, 8])
    eye = np.eye(k)

    def disc(x: np.ndarray) -> Tensor:
        h = ad.leaky_relu(ad.linear(Tensor(x), p["fc0.weight"], p["fc0.bias"]))
        out = ad.linear(h, p["fc1.weight"], p["fc1.bias"])
        return ad.sigmoid(ad.reshape(out, (len(x),)))

    for step in range(steps):
        real = eye[rng.choice(k, size=batch, p=pt)]
        fake = eye[rng.choice(k, size=batch, p=pz)]
        p.zero_grad()
        with ad.Tape() as tape:
            ad.backward(adv_loss_discriminator(disc(real), disc(fake)), tape)
        adam_step(p, opt, lr * max(0.02, 1.0 - step / steps))
    with ad.no_grad():
        learned = disc(eye).data
    return BinDiscriminatorFit(learned, optimal_discriminator(pt, pz))


# ------------------------------------------------------------- end to end


@dataclass
class EndToEndResult:
    accuracy: float
    per_class: dict[str, float]
    report: DeblurReport
    epochs: list[EpochSummary]
    seconds: float
    state: TrainState = field(repr=False)
    metric_tsv: str = field(repr=False, default="")

    @property
    def recon_ratio(self) -> float:
        """Final-epoch mean train reconstruction error over the first epoch's."""
        return self.epochs[-1].recon_error / self.epochs[0].recon_error


def ensure_corpus(directory, seed: int = 0, counts=None):
    """Reuse a corpus directory if it holds a manifest, else render one."""
    d = Path(directory)
    if (d / "manifest.tsv").is_file():
        return ingest_external(d)
    return make_corpus(counts, seed=seed, out_dir=d)


def end_to_end(corpus_dir, config: TrainConfig = TrainConfig(), corpus_seed: int = 0,
               progress=None) -> EndToEndResult:
    """Train on the train split and score the test split; time covers training only."""
    index = ensure_corpus(corpus_dir, corpus_seed)
    train = load_samples(index.split("train"))
    test = load_samples(index.split("test"))
    t0 = time.perf_counter()

    def on_epoch(state, summ):
        if progress is not None:
            progress(state, summ, time.perf_counter() - t0, test)

    state, mlog = train_main(train, config, on_epoch=on_epoch)
    seconds = time.perf_counter() - t0
    acc = classify_accuracy(state, test)
    return EndToEndResult(acc.overall, acc.per_class, deblur_decimate_report(state, test),
                          mlog.epochs, seconds, state, mlog.to_tsv())


# --------------------------------------------------------------- ablation


def ablation_study(train: LabeledSamples, test: LabeledSamples, seeds, config: TrainConfig,
                   aug_counts: dict[str, int], aug_config: TrainConfig | None = None
                   ) -> list[AblationResult]:
    out = []
    for s in seeds:
        res = run_ablation(train, test, config.replace(seed=s), aug_counts,
                           (aug_config or config).replace(seed=s))
        log.info("ablation seed %d: %s", s, res.rows)
        out.append(res)
    return out


def majority(flags) -> bool:
    flags = list(flags)
    return sum(flags) * 2 > len(flags)


# ------------------------------------------------------------ augmentation


@dataclass
class AugmentationRun:
    seed: int
    consistency: dict[str, dict[str, float]]  # variant -> class -> fraction
    loss_mi: dict[str, list[float]]  # variant -> per-epoch L_I

    def mean(self, variant: str) -> float:
        return float(np.mean(list(self.consistency[variant].values())))


def augmentation_study(train: LabeledSamples, seeds, config: TrainConfig, per_class: int = 100,
                       reference_epochs: int = 8) -> list[AugmentationRun]:
    """Class-consistency of the MI-trained augmenter and its lambda_mi = 0 twin."""
    counts = {c: per_class for c in CLASSES}
    runs = []
    for s in seeds:
        ref = train_reference_classifier(train, epochs=reference_epochs, seed=s)
        cons, mis = {}, {}
        for variant, lam in (("mi", config.loss_weights.lambda_mi), ("vanilla", 0.0)):
            cfg = config.replace(seed=s, lambda_mi=lam)
            state, mlog = train_augmenter(train, cfg)
            cons[variant] = augmentation_consistency(generate_augmented(state, counts, s), ref)
            mis[variant] = [e.loss_mi for e in mlog.epochs]
            log.info("augmentation seed %d %s: mean consistency %.3f", s, variant,
                     np.mean(list(cons[variant].values())))
        runs.append(AugmentationRun(s, cons, mis))
    return runs
