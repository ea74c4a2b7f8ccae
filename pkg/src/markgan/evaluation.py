"""Metrics for the trained models and the ablation driver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import (CLASSES, NULL, CorpusIndex, CorruptionParams, LabeledSamples, corrupt,
                     load_samples, write_pgm)
from .losses import cross_entropy
from .models import DiscriminatorNet, GeneratorNet, recalibrate_batchnorm
from .nn import AdamState, adam_step
from .pipeline import TrainConfig, TrainState, generate_augmented, train_augmenter, train_main


class EvalError(ValueError):
    pass


def _samples(split) -> LabeledSamples:
    if isinstance(split, CorpusIndex):
        return load_samples(split)
    return split


def _eval_forward(net, x: np.ndarray, batch: int = 256):
    prev = net.train
    net.train = False
    try:
        with ad.no_grad():
            outs = [net(Tensor(x[s:s + batch])) for s in range(0, len(x), batch)]
    finally:
        net.train = prev
    return outs


def generate(G: GeneratorNet, x: np.ndarray) -> np.ndarray:
    if len(x) == 0:
        return x.copy()
    return np.concatenate([o.data for o in _eval_forward(G, x)])


def class_logits(D: DiscriminatorNet, x: np.ndarray) -> np.ndarray:
    return np.concatenate([o[1].data for o in _eval_forward(D, x)])


def predict(D: DiscriminatorNet, x: np.ndarray) -> np.ndarray:
    return class_logits(D, x).argmax(axis=1)


@dataclass
class Accuracy:
    overall: float
    per_class: dict[str, float]
    counts: dict[str, int]

    def as_rows(self) -> list[tuple[str, int, float]]:
        rows = [(c, self.counts[c], self.per_class[c]) for c in CLASSES if self.counts.get(c)]
        return rows + [("overall", sum(self.counts.values()), self.overall)]


def accuracy_from_predictions(pred: np.ndarray, labels: np.ndarray) -> Accuracy:
    if len(labels) == 0:
        raise EvalError("cannot score an empty split")
    per, counts = {}, {}
    for k, c in enumerate(CLASSES):
        m = labels == k
        counts[c] = int(m.sum())
        per[c] = float((pred[m] == k).mean()) if m.any() else float("nan")
    return Accuracy(float((pred == labels).mean()), per, counts)


def classify_accuracy(state_or_nets, split, use_generator: bool = True,
                      use_corrupted: bool = True) -> Accuracy:
    """Argmax of the class head on G(x~) (pipeline mode), x~, or x, in eval mode."""
    G, D = _nets(state_or_nets)
    s = _samples(split)
    if len(s) == 0:
        raise EvalError("cannot score an empty split")
    x = s.corrupted if use_corrupted else s.clean
    if use_generator:
        x = generate(G, x)
    return accuracy_from_predictions(predict(D, x), s.labels)


def _nets(obj):
    if isinstance(obj, TrainState):
        return obj.models.generator, obj.models.discriminator
    return obj


def _per_image_sq(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-image mean squared difference."""
    d = (a - b).reshape(len(a), -1)
    return (d * d).mean(axis=1)


@dataclass
class DeblurReport:
    deblur_gap: float  # mean ||x~ - x||^2 - mean ||G(x~) - x||^2 over positives
    decimate_score: float  # mean ||G(n) - n||^2 over negatives
    positive_recon: float  # mean ||G(x~) - x||^2 over positives
    positive_baseline: float  # mean ||x~ - x||^2 over positives
    psnr_corrupted: float
    psnr_deblurred: float

    @property
    def decimation_ratio(self) -> float:
        return self.decimate_score / self.positive_recon if self.positive_recon > 0 else math.inf


def psnr(mse: float, peak: float = 1.0) -> float:
    return math.inf if mse <= 0 else 10.0 * math.log10(peak * peak / mse)


def deblur_decimate_report(generator, split) -> DeblurReport:
    """Per-pixel mean squared errors, averaged over images.

    ``generator`` is a GeneratorNet, a TrainState, or any callable mapping an
    image batch array to an array of the same shape (e.g. the identity).
    """
    s = _samples(split)
    pos = s.labels != NULL
    if not pos.any() or pos.all():
        raise EvalError("split needs both positive and NULL samples")
    fn = _generator_fn(generator)
    xc_p, x_p, n = s.corrupted[pos], s.clean[pos], s.corrupted[~pos]
    g_p = fn(xc_p)
    g_n = fn(n)
    recon = float(_per_image_sq(g_p, x_p).mean())
    base = float(_per_image_sq(xc_p, x_p).mean())
    dec = float(_per_image_sq(g_n, n).mean())
    return DeblurReport(base - recon, dec, recon, base, psnr(base), psnr(recon))


def _generator_fn(g):
    if isinstance(g, TrainState):
        g = g.models.generator
    if isinstance(g, GeneratorNet):
        return lambda x: generate(g, x)
    return g


def dump_triptychs(generator, split, out_dir, limit: int = 32) -> list[Path]:
    """Write corrupted | deblurred | clean strips as PGM files."""
    s = _samples(split)
    fn = _generator_fn(generator)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k = min(limit, len(s))
    g = fn(s.corrupted[:k])
    paths = []
    for i in range(k):
        strip = np.concatenate([s.corrupted[i, 0], g[i, 0], s.clean[i, 0]], axis=1)
        p = out / f"{s.ids[i]}_{CLASSES[s.labels[i]]}.pgm"
        write_pgm(p, strip)
        paths.append(p)
    return paths


# ------------------------------------------------------------- augmentation


def train_reference_classifier(samples: LabeledSamples, epochs: int = 8, seed: int = 0,
                               batch_size: int = 32, lr: float = 1e-3) -> DiscriminatorNet:
    """Class head of a fresh discriminator fit to clean images only."""
    D = DiscriminatorNet(seed=seed + 17)
    opt = AdamState.for_params(D.params)
    for name in ("head_gan.weight", "head_gan.bias", "head_mi.weight", "head_mi.bias"):
        D.params.freeze(name)
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch, 5])
        order = rng.permutation(len(samples))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:
                continue
            D.params.zero_grad()
            with ad.Tape() as tape:
                _, logits, _ = D(Tensor(samples.clean[idx]))
                loss = cross_entropy(logits, samples.labels[idx])
                ad.backward(loss, tape)
            adam_step(D.params, opt, lr)
    order = np.random.default_rng([seed, epochs, 5]).permutation(len(samples))
    recalibrate_batchnorm(D, (Tensor(samples.clean[order[s:s + 256]])
                              for s in range(0, len(order), 256) if len(order[s:s + 256]) >= 2))
    return D


def augmentation_consistency(aug, reference: DiscriminatorNet) -> dict[str, float]:
    """Per class, the fraction of generated images the reference assigns to their code."""
    if isinstance(aug, CorpusIndex):
        s = load_samples(aug)
        images, labels = s.clean, s.labels
    else:
        images, labels = aug
    pred = predict(reference, images)
    out = {}
    for k, c in enumerate(CLASSES):
        m = labels == k
        if not m.any():
            raise EvalError(f"class {c} absent from the augmented set")
        out[c] = float((pred[m] == k).mean())
    return out


# ----------------------------------------------------------------- ablation

ABLATION_VARIANTS = ("full", "no_deblur", "no_clc_loss", "no_augmentation")


@dataclass
class AblationResult:
    rows: list[tuple[str, float]] = field(default_factory=list)  # (variant, pipeline accuracy)

    def accuracy(self, variant: str) -> float:
        return dict(self.rows)[variant]

    def to_tsv(self) -> str:
        ordered = sorted(self.rows, key=lambda r: (-r[1], ABLATION_VARIANTS.index(r[0])))
        lines = ["variant\tpipeline_accuracy"] + [f"{v}\t{a!r}" for v, a in ordered]
        return "\n".join(lines) + "\n"


def augment_samples(state: TrainState, counts: dict[str, int], seed: int,
                    corruption: CorruptionParams | None = None) -> LabeledSamples:
    """In-memory augmented training samples with corrupted views derived per seed."""
    imgs, labels = generate_augmented(state, counts, seed)
    imgs = np.round(imgs * 255.0) / 255.0  # same quantization as a PGM round trip
    corruption = corruption or CorruptionParams()
    rng = np.random.default_rng([seed, 3])
    seeds = rng.integers(0, 2**31 - 1, size=len(labels))
    cor = np.stack([corrupt(im, corruption, int(s)) for im, s in zip(imgs, seeds)]) \
        if len(imgs) else imgs.copy()
    ids = [f"aug{i:05d}" for i in range(len(labels))]
    return LabeledSamples(ids, imgs, cor, labels)


def run_ablation(train: LabeledSamples, test: LabeledSamples, config: TrainConfig,
                 aug_counts: dict[str, int], aug_config: TrainConfig | None = None,
                 variants=ABLATION_VARIANTS) -> AblationResult:
    """Train and score the full model and its three ablations on one seed."""
    bad = [v for v in variants if v not in ABLATION_VARIANTS]
    if bad:
        raise ValueError(f"unknown ablation variant(s): {', '.join(map(repr, bad))}")
    res = AblationResult()
    aug = None
    if any(v != "no_augmentation" for v in variants):
        aug_state, _ = train_augmenter(train, aug_config or config)
        aug = augment_samples(aug_state, aug_counts, config.seed)
    for v in variants:
        cfg = config
        # each ablation removes exactly one component from the full model
        data = train if v == "no_augmentation" else LabeledSamples.concat([train, aug])
        if v == "no_deblur":
            cfg = config.replace(use_generator=False)
        elif v == "no_clc_loss":
            cfg = config.replace(use_clc_loss=False)
        state, _ = train_main(data, cfg)
        acc = classify_accuracy(state, test, use_generator=cfg.use_generator)
        if not math.isfinite(acc.overall):
            raise EvalError(f"variant {v} produced a non-finite accuracy")
        res.rows.append((v, acc.overall))
    return res
