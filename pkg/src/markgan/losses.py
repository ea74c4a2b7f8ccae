"""Adversarial, mutual-information, reconstruction and classification objectives."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

# log() floor for probabilities that saturate to exactly 0 or 1 in float64
PROB_FLOOR = 1e-12


class ProbabilityRangeError(ValueError):
    pass


class LabelRangeError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


class MalformedCodeError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_mse: float = 0.05
    lambda_mi: float = 1.0

    def __post_init__(self):
        if not self.lambda_mse > 0:
            raise ValueError(f"lambda_mse must be > 0, got {self.lambda_mse}")
        if self.lambda_mi < 0:
            # 0 is the vanilla-GAN ablation switch
            raise ValueError(f"lambda_mi must be >= 0, got {self.lambda_mi}")


def _check_probs(p: Tensor, who: str) -> None:
    d = p.data
    if not np.all(np.isfinite(d)) or d.min(initial=0.5) < 0.0 or d.max(initial=0.5) > 1.0:
        raise ProbabilityRangeError(f"{who}: probabilities must lie in [0, 1]")


def adv_loss_discriminator(real_prob_on_x: Tensor, real_prob_on_gx: Tensor) -> Tensor:
    """-mean log D(X) - mean log(1 - D(G(X~)))."""
    _check_probs(real_prob_on_x, "adv_loss_discriminator")
    _check_probs(real_prob_on_gx, "adv_loss_discriminator")
    real = ad.mean(ad.log(real_prob_on_x, PROB_FLOOR))
    fake = ad.mean(ad.log(1.0 - real_prob_on_gx, PROB_FLOOR))
    return -(real + fake)


def adv_loss_generator(real_prob_on_gx: Tensor) -> Tensor:
    """Non-saturating generator loss -mean log D(G(X~))."""
    _check_probs(real_prob_on_gx, "adv_loss_generator")
    return -ad.mean(ad.log(real_prob_on_gx, PROB_FLOOR))


def optimal_discriminator(pt, pz) -> np.ndarray:
    """Pointwise p_t / (p_t + p_z); the fixed-generator optimum."""
    pt = np.asarray(pt, dtype=np.float64)
    pz = np.asarray(pz, dtype=np.float64)
    if np.any(pt < 0) or np.any(pz < 0):
        raise ValueError("densities must be non-negative")
    denom = pt + pz
    if np.any(denom == 0):
        raise ValueError("p_t and p_z are both zero at some point")
    return pt / denom


def _check_onehot(code: np.ndarray) -> None:
    if code.ndim != 2 or not np.all((code == 0) | (code == 1)) or not np.all(code.sum(axis=1) == 1):
        raise MalformedCodeError("code rows must be one-hot")


def code_entropy(code_onehot: np.ndarray) -> float:
    """Entropy of the empirical categorical distribution of a batch of codes."""
    freq = code_onehot.mean(axis=0)
    nz = freq[freq > 0]
    return float(-(nz * np.log(nz)).sum())


def mi_lower_bound(code_onehot, mi_logits: Tensor) -> Tensor:
    """Variational bound H(c) + E[log Q(c | G(z, c))] on I(c; G(z, c))."""
    code = np.asarray(code_onehot.data if isinstance(code_onehot, Tensor) else code_onehot,
                      dtype=np.float64)
    _check_onehot(code)
    if code.shape != mi_logits.shape:
        raise ShapeError(f"code {code.shape} vs logits {mi_logits.shape}")
    if not np.all(np.isfinite(mi_logits.data)):
        raise NonFiniteLossError("mi_logits contain non-finite values")
    logq = ad.log_softmax(mi_logits, axis=1)
    cross = ad.sum(ad.mul(logq, code)) / code.shape[0]
    return cross + code_entropy(code)


def mse_loss(x: Tensor, x_prime: Tensor) -> Tensor:
    """Mean squared difference over every element."""
    if x.shape != x_prime.shape:
        raise ShapeError(f"mse_loss shape mismatch: {x.shape} vs {x_prime.shape}")
    return ad.mean(ad.square(ad.sub(x, x_prime)))


def squared_norm_loss(x: Tensor, x_prime: Tensor) -> Tensor:
    """Per-image squared L2 norm ||x - x'||^2, averaged over the batch.

    Equal to ``mse_loss * pixels_per_image``; this is the reconstruction term
    the training objective weights by ``lambda_mse``.
    """
    if x.shape != x_prime.shape:
        raise ShapeError(f"squared_norm_loss shape mismatch: {x.shape} vs {x_prime.shape}")
    return ad.sum(ad.square(ad.sub(x, x_prime))) / x.shape[0]


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    k = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelRangeError(f"labels must lie in [0, {k})")
    onehot = np.eye(k)[labels]
    return -ad.sum(ad.mul(ad.log_softmax(logits, axis=1), onehot)) / max(len(labels), 1)


def classification_loss(class_logits_on_gx: Tensor, class_logits_on_x: Tensor, labels) -> Tensor:
    """Cross-entropy of both logit sets against the labels, each batch-averaged, summed."""
    return cross_entropy(class_logits_on_gx, labels) + cross_entropy(class_logits_on_x, labels)


def adv_with_mi(adv: Tensor, mi_bound: Tensor, weights: LossWeights) -> Tensor:
    """Adversarial term with the MI bound subtracted, so minimizing maximizes MI."""
    return adv - weights.lambda_mi * mi_bound


def total_loss(loss_gd, loss_mse, loss_clc, weights: LossWeights = LossWeights()):
    """L_GD + lambda_mse * L_MSE + L_clc. Accepts Tensors or plain floats."""
    for name, part in (("L_GD", loss_gd), ("L_MSE", loss_mse), ("L_clc", loss_clc)):
        val = part.data if isinstance(part, Tensor) else np.asarray(part)
        if not np.all(np.isfinite(val)):
            raise NonFiniteLossError(f"{name} is not finite")
    if any(isinstance(p, Tensor) for p in (loss_gd, loss_mse, loss_clc)):
        return loss_gd + weights.lambda_mse * loss_mse + loss_clc
    return float(loss_gd) + weights.lambda_mse * float(loss_mse) + float(loss_clc)


LN10 = math.log(10.0)
