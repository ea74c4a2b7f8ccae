"""Parameter containers, initialization, Adam, and the learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import DTYPE, RunningStats, Tensor

OWNERS = ("generator", "discriminator", "mi_head", "augmenter")


class MissingGradientError(RuntimeError):
    pass


class ParamSet:
    """Named parameters with insertion-ordered iteration.

    Names ending in ``.bias`` or ``.beta`` are biases (zero init), ``.gamma``
    are batch-norm scales (one init); everything else is a weight.
    """

    def __init__(self, owner: str):
        if owner not in OWNERS:
            raise ValueError(f"unknown owner tag {owner!r}")
        self.owner = owner
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()
        self.stats: dict[str, RunningStats] = {}

    def add(self, name: str, shape: tuple[int, ...]) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_stats(self, name: str, channels: int) -> RunningStats:
        s = RunningStats.fresh(channels)
        self.stats[name] = s
        return s

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def freeze(self, name: str) -> None:
        self._frozen.add(name)
        self._params[name].requires_grad = False

    def unfreeze(self, name: str) -> None:
        self._frozen.discard(name)
        self._params[name].requires_grad = True

    def is_trainable(self, name: str) -> bool:
        return name not in self._frozen

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if n not in self._frozen)

    def set_requires_grad(self, flag: bool) -> None:
        """Toggle gradient recording without touching the frozen set."""
        for n, t in self._params.items():
            t.requires_grad = flag and n not in self._frozen

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters plus running statistics, for checkpointing."""
        out = {n: t.data for n, t in self._params.items()}
        for n, s in self.stats.items():
            out[f"{n}.running_mean"] = s.mean
            out[f"{n}.running_var"] = s.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self._params.items():
            src = arrays[n]
            if src.shape != t.shape:
                raise ValueError(f"{n}: shape {src.shape} != {t.shape}")
            t.data = np.array(src, dtype=DTYPE)
        for n, s in self.stats.items():
            s.mean = np.array(arrays[f"{n}.running_mean"], dtype=DTYPE)
            s.var = np.array(arrays[f"{n}.running_var"], dtype=DTYPE)


def is_bias(name: str) -> bool:
    return name.endswith(".bias") or name.endswith(".beta")


def init_weights(params: ParamSet, seed: int, std: float = 0.01) -> None:
    """Gaussian(0, std^2) weights, zero biases, unit batch-norm scales."""
    rng = np.random.default_rng(seed)
    for name, t in params:
        if is_bias(name):
            t.data = np.zeros(t.shape, dtype=DTYPE)
        elif name.endswith(".gamma"):
            t.data = np.ones(t.shape, dtype=DTYPE)
        else:
            t.data = rng.normal(0.0, std, size=t.shape)
        t.grad = None
    for s in params.stats.values():
        s.mean[:] = 0.0
        s.var[:] = 1.0


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, **kw) -> "AdamState":
        st = cls(**kw)
        for name, t in params:
            st.m[name] = np.zeros(t.shape, dtype=DTYPE)
            st.v[name] = np.zeros(t.shape, dtype=DTYPE)
        return st


def adam_step(params: ParamSet, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update of every trainable parameter, in place."""
    missing = [n for n, t in params.trainable() if t.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for: {', '.join(missing)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, t in params.trainable():
        g = t.grad
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        t.data = t.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def lr_schedule(epoch: int, base: float = 1e-4, decayed: float = 1e-5,
                switch_epoch: int = 10, multiplier: float = 1.0) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return (base if epoch < switch_epoch else decayed) * multiplier
