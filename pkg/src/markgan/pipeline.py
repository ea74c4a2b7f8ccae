"""Training loops (deblur/classify GAN and the augmenter), stopping rule,
checkpointing, and augmented-set production."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .autodiff import Tensor
from .corpus import (CLASSES, NULL, AUGMENTED_COUNTS, CorpusError, CorpusIndex, CorruptionParams,
                     LabeledSamples, load_samples, write_samples)
from .losses import (LossWeights, NonFiniteLossError, adv_loss_discriminator,
                     adv_loss_generator, adv_with_mi, classification_loss,
                     cross_entropy, mi_lower_bound, squared_norm_loss,
                     total_loss)
from .models import NUM_CLASSES, LatentCode, Models, recalibrate_batchnorm
from .nn import AdamState, adam_step, lr_schedule

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    g_steps_per_d_step: int = 2
    g_lr_multiplier: float = 2.0
    loss_weights: LossWeights = LossWeights()
    rho: float = 1e-3
    seed: int = 0
    lr_base: float = 1e-4
    lr_decayed: float = 1e-5
    lr_switch_epoch: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    # ablation switches
    use_generator: bool = True
    use_clc_loss: bool = True
    # augmenter: also fit Q to the codes of fakes; off by default, see train_augmenter
    q_on_fakes: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size", "g_steps_per_d_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.rho > 0 or not self.g_lr_multiplier > 0:
            raise ValueError("rho and g_lr_multiplier must be > 0")

    def lr_d(self, epoch: int) -> float:
        return lr_schedule(epoch, self.lr_base, self.lr_decayed, self.lr_switch_epoch)

    def lr_g(self, epoch: int) -> float:
        return lr_schedule(epoch, self.lr_base, self.lr_decayed, self.lr_switch_epoch,
                           self.g_lr_multiplier)

    def flat(self) -> dict:
        d = dataclasses.asdict(self)
        lw = d.pop("loss_weights")
        d["lambda_mse"] = lw["lambda_mse"]
        d["lambda_mi"] = lw["lambda_mi"]
        return d

    @classmethod
    def from_flat(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        lw = LossWeights(float(d.pop("lambda_mse", 0.05)), float(d.pop("lambda_mi", 1.0)))
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in types:
                raise ValueError(f"unknown config key {k!r}")
            kw[k] = _coerce(k, v, types[k])
        return cls(loss_weights=lw, **kw)

    def replace(self, **kw) -> "TrainConfig":
        flat = self.flat()
        flat.update(kw)
        return TrainConfig.from_flat(flat)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.flat().items())


def _coerce(key: str, v, typ: str):
    if isinstance(v, str):
        v = v.strip()
        if typ == "bool":
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"{key}: expected a boolean, got {v!r}")
    try:
        return {"int": int, "float": float, "bool": bool}[typ](v)
    except (KeyError, ValueError) as e:
        raise ValueError(f"{key}: cannot parse {v!r} as {typ}") from e


def parse_config_text(text: str) -> dict[str, str]:
    """``key = value`` lines, ``#`` comments, blank lines ignored."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value', got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path, **overrides) -> TrainConfig:
    flat = TrainConfig().flat()
    if path is not None:
        flat.update(parse_config_text(Path(path).read_text(encoding="ascii")))
    flat.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_flat(flat)


def should_stop(mean_recon_error: float, config: TrainConfig) -> bool:
    """Stop once the mean positive reconstruction error drops strictly below rho."""
    if mean_recon_error < 0:
        raise ValueError("reconstruction error must be >= 0")
    return mean_recon_error < config.rho


# ------------------------------------------------------------------- logging

LOG_COLUMNS = ("epoch", "step", "loss_gd", "loss_mse", "loss_clc", "loss_mi", "lr_g", "lr_d",
               "loss_d")


@dataclass
class EpochSummary:
    epoch: int
    d_steps: int = 0
    g_steps: int = 0
    recon_error: float = 0.0  # mean over G-steps of the positive-sample MSE
    loss_mi: float = 0.0
    code_entropy: float = 0.0
    stopped: bool = False


@dataclass
class MetricLog:
    rows: list[tuple] = field(default_factory=list)
    epochs: list[EpochSummary] = field(default_factory=list)

    def add(self, *vals) -> None:
        self.rows.append(tuple(vals))

    def to_tsv(self) -> str:
        lines = ["\t".join(LOG_COLUMNS)]
        for r in self.rows:
            lines.append("\t".join(str(v) if isinstance(v, int) else repr(float(v)) for v in r))
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_tsv(), encoding="utf-8")


# --------------------------------------------------------------------- state

OPTIM_KEYS = ("generator", "discriminator", "augmenter", "aug_discriminator")


@dataclass
class TrainState:
    models: Models
    optim: dict[str, AdamState]
    config: TrainConfig
    epoch: int = 0  # main-loop epochs completed
    aug_epoch: int = 0

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        models = Models.fresh(config.seed)
        nets = models.named()
        optim = {k: AdamState.for_params(nets[k].params, beta1=config.beta1, beta2=config.beta2)
                 for k in OPTIM_KEYS}
        return cls(models, optim, config)


def save_checkpoint(state: TrainState, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for owner, net in state.models.named().items():
        for name, arr in net.params.state_arrays().items():
            tensors[f"{owner}/{name}"] = arr
    adam_meta = {}
    for owner, st in state.optim.items():
        adam_meta[owner] = {"t": st.t, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
        for name in st.m:
            tensors[f"adam/{owner}/m/{name}"] = st.m[name]
            tensors[f"adam/{owner}/v/{name}"] = st.v[name]
    meta = {"epoch": state.epoch, "aug_epoch": state.aug_epoch,
            "config": state.config.flat(), "adam": adam_meta}
    ckpt.write_file(path, meta, tensors)


def load_checkpoint(path) -> TrainState:
    meta, tensors = ckpt.read_file(path)
    try:
        config = TrainConfig.from_flat(meta["config"])
        state = TrainState.fresh(config)
        for owner, net in state.models.named().items():
            pre = f"{owner}/"
            net.params.load_arrays({k[len(pre):]: v for k, v in tensors.items()
                                    if k.startswith(pre)})
        for owner, st in state.optim.items():
            am = meta["adam"][owner]
            st.t, st.beta1, st.beta2, st.eps = am["t"], am["beta1"], am["beta2"], am["eps"]
            for name in st.m:
                st.m[name] = tensors[f"adam/{owner}/m/{name}"].copy()
                st.v[name] = tensors[f"adam/{owner}/v/{name}"].copy()
        state.epoch = int(meta["epoch"])
        state.aug_epoch = int(meta["aug_epoch"])
    except (KeyError, ValueError, TypeError) as e:
        raise ckpt.CorruptCheckpointError(f"checkpoint content invalid: {e}") from None
    return state


# ------------------------------------------------------------------ training


def _check_finite(epoch: int, step: int, **terms) -> None:
    for k, v in terms.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{k} is not finite at epoch {epoch}, step {step}")


def _check_outputs(epoch: int, step: int, *tensors: Tensor) -> None:
    # diverged weights show up here before a loss sees out-of-range probabilities
    for t in tensors:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteLossError(f"network output is not finite at epoch {epoch}, step {step}")


def _as_samples(corpus) -> LabeledSamples:
    if isinstance(corpus, LabeledSamples):
        return corpus
    if isinstance(corpus, CorpusIndex):
        return load_samples(corpus.split("train"))
    raise TypeError(f"expected CorpusIndex or LabeledSamples, got {type(corpus).__name__}")


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch-norm needs two samples
    return [b for b in out if len(b) >= 2]


def _onehot(labels: np.ndarray) -> np.ndarray:
    return np.eye(NUM_CLASSES)[labels]


def train_main(corpus, config: TrainConfig, state: TrainState | None = None,
               metric_log: MetricLog | None = None,
               on_epoch: Callable[[TrainState, EpochSummary], None] | None = None
               ) -> tuple[TrainState, MetricLog]:
    """Alternate one D-step with ``g_steps_per_d_step`` G-steps per batch.

    Epoch ``e`` draws its batch order from ``default_rng([seed, e])`` so a run
    resumed from a checkpoint replays exactly what an uninterrupted run does.
    """
    data = _as_samples(corpus)
    if len(data) == 0:
        raise CorpusError("training set is empty")
    pos = data.labels != NULL
    if not pos.any() or pos.all():
        raise CorpusError("training set needs at least one positive and one NULL sample")
    state = state or TrainState.fresh(config)
    metric_log = metric_log or MetricLog()
    G = state.models.generator
    D = state.models.discriminator
    G.train = D.train = True
    lw = config.loss_weights
    step = sum(1 for r in metric_log.rows)

    while state.epoch < config.epochs:
        epoch = state.epoch
        rng = np.random.default_rng([config.seed, epoch])
        lr_g, lr_d = config.lr_g(epoch), config.lr_d(epoch)
        summ = EpochSummary(epoch)
        recon = []
        for idx in _batches(len(data), config.batch_size, rng):
            xr = Tensor(data.clean[idx])
            xc = Tensor(data.corrupted[idx])
            y = data.labels[idx]
            P = np.flatnonzero(y != NULL)
            n = len(idx)

            # ---- D-step
            G.params.set_requires_grad(False)
            D.params.set_requires_grad(True)
            D.params.zero_grad()
            with ad.Tape() as tape:
                if config.use_generator:
                    with ad.no_grad():
                        fake = G(xc)
                else:
                    fake = xc
                prob, clc, mi = D(ad.concat([xr, fake]))
                _check_outputs(epoch, step, prob, clc, mi)
                loss_d = classification_loss(ad.take(clc, slice(n, 2 * n)),
                                             ad.take(clc, slice(0, n)), y)
                loss_mi = 0.0
                if config.use_generator and len(P):
                    adv = adv_loss_discriminator(ad.take(prob, P), ad.take(prob, n + P))
                    lb = mi_lower_bound(_onehot(y[P]), ad.take(mi, n + P))
                    loss_d = loss_d + adv_with_mi(adv, lb, lw)
                    loss_mi = lb.item()
                _check_finite(epoch, step, loss_d=loss_d.item())
                ad.backward(loss_d, tape)
            _fill_missing_grads(D.params)
            adam_step(D.params, state.optim["discriminator"], lr_d)
            summ.d_steps += 1

            # ---- G-steps
            gd = mse = clc_v = 0.0
            if config.use_generator and len(P):
                D.params.set_requires_grad(False)
                G.params.set_requires_grad(True)
                for _ in range(config.g_steps_per_d_step):
                    G.params.zero_grad()
                    with ad.Tape() as tape:
                        fake = G(xc)
                        prob, clc, mi = D(ad.concat([xr, fake]))
                        _check_outputs(epoch, step, fake, prob, clc, mi)
                        fake_p = ad.take(fake, P)
                        l_gd = adv_with_mi(adv_loss_generator(ad.take(prob, n + P)),
                                           mi_lower_bound(_onehot(y[P]), ad.take(mi, n + P)), lw)
                        l_mse = squared_norm_loss(fake_p, ad.take(xr, P))
                        if config.use_clc_loss:
                            l_clc = classification_loss(ad.take(clc, n + P), ad.take(clc, P), y[P])
                        else:
                            l_clc = Tensor(0.0)
                        loss = total_loss(l_gd, l_mse, l_clc, lw)
                        gd, clc_v = l_gd.item(), l_clc.item()
                        mse = l_mse.item() / fake_p.data[0].size
                        _check_finite(epoch, step, loss_gd=gd, loss_mse=mse, loss_clc=clc_v)
                        ad.backward(loss, tape)
                    _fill_missing_grads(G.params)
                    adam_step(G.params, state.optim["generator"], lr_g)
                    summ.g_steps += 1
                    recon.append(mse)
                D.params.set_requires_grad(True)
            metric_log.add(epoch, step, gd, mse, clc_v, loss_mi, lr_g, lr_d, loss_d.item())
            step += 1

        summ.recon_error = float(np.mean(recon)) if recon else 0.0
        state.epoch += 1
        summ.stopped = bool(recon) and should_stop(summ.recon_error, config)
        metric_log.epochs.append(summ)
        log.info("epoch %d: d_steps=%d g_steps=%d recon=%.5f", epoch, summ.d_steps,
                 summ.g_steps, summ.recon_error)
        if on_epoch:
            on_epoch(state, summ)
        if summ.stopped:
            break
    G.params.set_requires_grad(True)
    D.params.set_requires_grad(True)
    return state, metric_log


def _fill_missing_grads(params) -> None:
    # parameters outside the loss graph this step (e.g. an unused head) get zero grads
    for _, t in params.trainable():
        if t.grad is None:
            t.grad = np.zeros(t.shape)


def balanced_codes(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform class codes whose per-class counts differ by at most one.

    Keeps the batch's empirical H(c) within about 0.01 of ln 10 for n = 32,
    where i.i.d. draws would sit near ln 10 - 9/(2n).
    """
    return rng.permutation(np.resize(rng.permutation(NUM_CLASSES), n))


def train_augmenter(corpus, config: TrainConfig, state: TrainState | None = None,
                    metric_log: MetricLog | None = None) -> tuple[TrainState, MetricLog]:
    """Class-conditional InfoGAN-style training of the augmentation generator.

    Codes are drawn uniformly over all classes. The Q head is fit to the labels
    of real samples only, so it reads glyph shape and the generator's MI term
    pushes code k toward images of class k. With ``q_on_fakes`` Q also learns
    the generator's codes, which lets the pair agree on texture that no real
    glyph carries. ``lambda_mi = 0`` removes every MI/Q term (vanilla GAN).
    """
    data = _as_samples(corpus)
    if len(data) == 0:
        raise CorpusError("training set is empty")
    state = state or TrainState.fresh(config)
    metric_log = metric_log or MetricLog()
    A = state.models.augmenter
    D = state.models.aug_discriminator
    A.train = D.train = True
    lam = config.loss_weights.lambda_mi
    by_class = [np.flatnonzero(data.labels == k) for k in range(NUM_CLASSES)]
    present = [k for k in range(NUM_CLASSES) if len(by_class[k])]
    B = config.batch_size
    iters = max(1, math.ceil(len(data) / B))
    step = len(metric_log.rows)

    while state.aug_epoch < config.epochs:
        epoch = state.aug_epoch
        rng = np.random.default_rng([config.seed, epoch, 1])
        lr_g, lr_d = config.lr_g(epoch), config.lr_d(epoch)
        summ = EpochSummary(epoch)
        mis = []
        code_counts = np.zeros(NUM_CLASSES)
        for _ in range(iters):
            yr = np.asarray(present)[rng.integers(0, len(present), size=B)]
            idx = np.array([by_class[k][rng.integers(0, len(by_class[k]))] for k in yr])
            xr = Tensor(data.clean[idx])
            code = LatentCode.sample(balanced_codes(B, rng), rng)
            code_counts += code.c.sum(axis=0)

            # ---- D/Q step
            A.params.set_requires_grad(False)
            D.params.set_requires_grad(True)
            D.params.zero_grad()
            with ad.Tape() as tape:
                with ad.no_grad():
                    fake = A(code)
                prob, _, mi = D(ad.concat([xr, fake]))
                _check_outputs(epoch, step, prob, mi)
                loss_d = adv_loss_discriminator(ad.take(prob, slice(0, B)),
                                                ad.take(prob, slice(B, 2 * B)))
                if lam > 0:
                    q_loss = cross_entropy(ad.take(mi, slice(0, B)), yr)
                    if config.q_on_fakes:
                        q_loss = q_loss - mi_lower_bound(code.c, ad.take(mi, slice(B, 2 * B)))
                    loss_d = loss_d + lam * q_loss
                _check_finite(epoch, step, loss_d=loss_d.item())
                ad.backward(loss_d, tape)
            _fill_missing_grads(D.params)
            adam_step(D.params, state.optim["aug_discriminator"], lr_d)
            summ.d_steps += 1

            # ---- generator steps
            D.params.set_requires_grad(False)
            A.params.set_requires_grad(True)
            for _ in range(config.g_steps_per_d_step):
                A.params.zero_grad()
                with ad.Tape() as tape:
                    fake = A(code)
                    prob, _, mi = D(ad.concat([xr, fake]))
                    _check_outputs(epoch, step, fake, prob, mi)
                    adv = adv_loss_generator(ad.take(prob, slice(B, 2 * B)))
                    lb = mi_lower_bound(code.c, ad.take(mi, slice(B, 2 * B)))
                    loss = adv_with_mi(adv, lb, config.loss_weights)
                    _check_finite(epoch, step, loss_gd=loss.item())
                    ad.backward(loss, tape)
                _fill_missing_grads(A.params)
                adam_step(A.params, state.optim["augmenter"], lr_g)
                summ.g_steps += 1
            D.params.set_requires_grad(True)
            mis.append(lb.item())
            metric_log.add(epoch, step, adv.item(), 0.0, 0.0, lb.item(), lr_g, lr_d,
                           loss_d.item())
            step += 1
        summ.loss_mi = float(np.mean(mis))
        freq = code_counts / code_counts.sum()
        summ.code_entropy = float(-(freq[freq > 0] * np.log(freq[freq > 0])).sum())
        metric_log.epochs.append(summ)
        state.aug_epoch += 1
        log.info("aug epoch %d: L_I=%.4f H(c)=%.4f", epoch, summ.loss_mi, summ.code_entropy)
    A.params.set_requires_grad(True)
    D.params.set_requires_grad(True)
    return state, metric_log


RECALIBRATION_BATCHES = 16


def generate_augmented(state: TrainState, counts: dict[str, int], seed: int
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode augmenter samples: (images [N,1,32,32] in [0,1], class indices [N]).

    Batch-norm statistics are recalibrated on fresh balanced codes for the
    sampling pass and restored afterwards, so the state is left untouched.
    """
    A = state.models.augmenter
    prev = A.train
    saved = {k: (st.mean.copy(), st.var.copy()) for k, st in A.params.stats.items()}
    rng = np.random.default_rng([seed, 2])
    labels = np.concatenate([np.full(int(counts[c]), i, dtype=np.intp)
                             for i, c in enumerate(CLASSES) if counts.get(c, 0) > 0])
    imgs = []
    try:
        recalibrate_batchnorm(A, [LatentCode.sample(balanced_codes(64, rng), rng)
                                  for _ in range(RECALIBRATION_BATCHES)])
        A.train = False
        with ad.no_grad():
            for s in range(0, len(labels), 256):
                code = LatentCode.sample(labels[s:s + 256], rng)
                imgs.append(A(code).data)
    finally:
        A.train = prev
        for k, (m, v) in saved.items():
            A.params.stats[k].mean, A.params.stats[k].var = m, v
    return (np.concatenate(imgs) if imgs else np.zeros((0, 1, 32, 32))), labels


def produce_augmented_set(state: TrainState, counts: dict[str, int] | None = None,
                          out_dir=None, seed: int = 0,
                          corruption: CorruptionParams | None = None) -> CorpusIndex:
    """Sample the augmenter per class and write the result in the corpus layout."""
    counts = dict(AUGMENTED_COUNTS if counts is None else counts)
    if out_dir is None:
        raise CorpusError("produce_augmented_set needs an output directory")
    imgs, labels = generate_augmented(state, counts, seed)
    rng = np.random.default_rng([seed, 3])
    seeds = rng.integers(0, 2**31 - 1, size=len(labels))
    return write_samples(imgs, labels, out_dir, seeds, corruption or CorruptionParams(),
                         split="train", id_prefix="aug")
