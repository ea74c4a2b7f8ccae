"""Central finite-difference verification of tape gradients for the full models."""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import (LossWeights, adv_loss_discriminator, adv_loss_generator, adv_with_mi,
                     classification_loss, mi_lower_bound, squared_norm_loss, total_loss)
from .models import NUM_CLASSES, LatentCode, Models
from .nn import ParamSet

# gradients smaller than this are compared absolutely rather than relatively
GRAD_FLOOR = 1e-6


@dataclass
class ParamCheck:
    net: str
    name: str
    checked: int = 0
    skipped_kink: int = 0
    max_rel_error: float = 0.0
    directional_rel_error: float = 0.0


@dataclass
class GradCheckReport:
    entries: list[ParamCheck] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def max_rel_error(self) -> float:
        return max((max(e.max_rel_error, e.directional_rel_error) for e in self.entries),
                   default=0.0)

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol and all(e.checked > 0 for e in self.entries)

    def to_tsv(self) -> str:
        lines = ["net\tparam\tchecked\tskipped_kink\tmax_rel_error\tdirectional_rel_error"]
        for e in self.entries:
            lines.append(f"{e.net}\t{e.name}\t{e.checked}\t{e.skipped_kink}\t"
                         f"{e.max_rel_error:.3e}\t{e.directional_rel_error:.3e}")
        return "\n".join(lines) + "\n"


def rel_error(a: float, b: float, floor: float = GRAD_FLOOR) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def _eval(loss_fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    with ad.no_grad(), ad.record_kinks() as kinks:
        val = loss_fn().item()
    return val, kinks


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


STEPS = (1e-4, 1e-5, 1e-6)


def _probe(loss_fn: Callable[[], Tensor], set_offset: Callable[[float], None]) -> float | None:
    """Central difference along one direction, or None if every step straddles a kink.

    A probe pair whose relu/leaky-relu sign pattern differs crosses a kink, so
    it is retried with a smaller step.
    """
    for h in STEPS:
        set_offset(h)
        fp, kp = _eval(loss_fn)
        set_offset(-h)
        fm, km = _eval(loss_fn)
        set_offset(0.0)
        if _same_pattern(kp, km):
            return (fp - fm) / (2 * h)
    return None


def check_params(loss_fn: Callable[[], Tensor], params: ParamSet, net: str,
                 rng: np.random.Generator, coords: int | None = 8) -> list[ParamCheck]:
    """Compare tape gradients of ``loss_fn`` with central differences.

    ``coords=None`` checks every element; otherwise a random subset of each
    tensor plus one random direction through the whole tensor.
    """
    params.zero_grad()
    params.set_requires_grad(True)
    with ad.Tape() as tape:
        loss = loss_fn()
        ad.backward(loss, tape)
    out = []
    for name, t in params:
        grad = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        pc = ParamCheck(net, name)
        flat = t.data.reshape(-1)
        if coords is None or flat.size <= coords:
            picks = range(flat.size)
        else:
            picks = rng.choice(flat.size, size=coords, replace=False)
        for i in picks:
            old = flat[i]

            def shift(d, i=i, old=old):
                flat[i] = old + d
            num = _probe(loss_fn, shift)
            if num is None:
                pc.skipped_kink += 1
                continue
            pc.checked += 1
            pc.max_rel_error = max(pc.max_rel_error, rel_error(grad.reshape(-1)[i], num))
        if coords is not None:
            v = rng.standard_normal(t.shape)
            v /= np.linalg.norm(v)
            base = t.data.copy()

            def along(d, t=t, base=base, v=v):
                t.data = base + d * v
            num = _probe(loss_fn, along)
            if num is not None:
                pc.directional_rel_error = rel_error(float((grad * v).sum()), num)
        out.append(pc)
    params.zero_grad()
    return out


def model_losses(models: Models, batch: int = 8, seed: int = 0,
                 weights: LossWeights = LossWeights()) -> dict[str, tuple[Callable, ParamSet]]:
    """The three training objectives on a fixed random batch, as closures."""
    rng = np.random.default_rng(seed)
    xr = Tensor(rng.uniform(0, 1, size=(batch, 1, 32, 32)))
    xc = Tensor(rng.uniform(0, 1, size=(batch, 1, 32, 32)))
    y = rng.integers(0, NUM_CLASSES, size=batch)
    onehot = np.eye(NUM_CLASSES)[y]
    code = LatentCode.sample(y, rng)
    G, D, A = models.generator, models.discriminator, models.augmenter
    Daug = models.aug_discriminator
    n = batch
    fake_slice = slice(n, 2 * n)

    def g_loss():
        fake = G(xc)
        prob, clc, mi = D(ad.concat([xr, fake]))
        gd = adv_with_mi(adv_loss_generator(ad.take(prob, fake_slice)),
                         mi_lower_bound(onehot, ad.take(mi, fake_slice)), weights)
        return total_loss(gd, squared_norm_loss(fake, xr),
                          classification_loss(ad.take(clc, fake_slice), ad.take(clc, slice(0, n)), y),
                          weights)

    def d_loss():
        prob, clc, mi = D(ad.concat([xr, xc]))
        adv = adv_loss_discriminator(ad.take(prob, slice(0, n)), ad.take(prob, fake_slice))
        lb = mi_lower_bound(onehot, ad.take(mi, fake_slice))
        return adv_with_mi(adv, lb, weights) + classification_loss(
            ad.take(clc, fake_slice), ad.take(clc, slice(0, n)), y)

    def a_loss():
        fake = A(code)
        prob, _, mi = Daug(ad.concat([xr, fake]))
        return adv_with_mi(adv_loss_generator(ad.take(prob, fake_slice)),
                           mi_lower_bound(code.c, ad.take(mi, fake_slice)), weights)

    return {"generator": (g_loss, G.params), "discriminator": (d_loss, D.params),
            "augmenter": (a_loss, A.params)}


def run_gradcheck(seed: int = 0, batch: int = 8, coords: int | None = 8) -> GradCheckReport:
    """Gradient check of G, D (all three heads) and the augmenter on fresh models."""
    t0 = time.perf_counter()
    models = Models.fresh(seed)
    snapshot = {k: copy.deepcopy(net.params.stats) for k, net in models.named().items()}
    rng = np.random.default_rng([seed, 99])
    report = GradCheckReport()
    for net, (fn, params) in model_losses(models, batch, seed).items():
        # every other network is held fixed while this one is probed
        for other in models.named().values():
            other.params.set_requires_grad(False)
        report.entries += check_params(fn, params, net, rng, coords)
    for k, net in models.named().items():
        net.params.set_requires_grad(True)
        net.params.stats.update(snapshot[k])
    report.seconds = time.perf_counter() - t0
    return report
