"""Generator autoencoder, two-branch discriminator with an MI head, and the
class-conditional augmentation generator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .losses import MalformedCodeError
from .nn import ParamSet, init_weights

NUM_CLASSES = 10
IMAGE_SIZE = 32
Z_DIM = 64


@dataclass(frozen=True)
class ConvStage:
    """One (transposed-)conv stage: conv -> [batch-norm] -> activation."""

    name: str
    c_in: int
    c_out: int
    kernel: int = 4
    stride: int = 2
    pad: int = 1
    transpose: bool = False
    batchnorm: bool = True
    activation: str = "leaky_relu"  # leaky_relu | relu | sigmoid

    def param_count(self) -> int:
        n = self.c_in * self.c_out * self.kernel * self.kernel + self.c_out
        return n + (2 * self.c_out if self.batchnorm else 0)


@dataclass(frozen=True)
class GeneratorArch:
    widths: tuple[int, ...] = (16, 32, 64)
    slope: float = 0.2
    image_size: int = IMAGE_SIZE

    def stages(self) -> list[ConvStage]:
        w = (1,) + self.widths
        enc = [ConvStage(f"enc{i}", w[i], w[i + 1]) for i in range(len(self.widths))]
        dec = []
        rev = w[::-1]
        for i in range(len(self.widths)):
            last = i == len(self.widths) - 1
            dec.append(ConvStage(f"dec{i}", rev[i], rev[i + 1], transpose=True,
                                 batchnorm=not last, activation="sigmoid" if last else "relu"))
        return enc + dec

    def param_count(self) -> int:
        return sum(s.param_count() for s in self.stages())


@dataclass(frozen=True)
class DiscriminatorArch:
    widths: tuple[int, ...] = (16, 32, 64)
    slope: float = 0.2
    num_classes: int = NUM_CLASSES
    code_dim: int = NUM_CLASSES

    def stages(self) -> list[ConvStage]:
        w = (1,) + self.widths
        return [ConvStage(f"trunk{i}", w[i], w[i + 1], batchnorm=i > 0)
                for i in range(len(self.widths))]

    def feature_dim(self) -> int:
        side = IMAGE_SIZE // 2 ** len(self.widths)
        return self.widths[-1] * side * side

    def head_sizes(self) -> dict[str, int]:
        return {"head_gan": 1, "head_clc": self.num_classes, "head_mi": self.code_dim}

    def param_count(self) -> int:
        f = self.feature_dim()
        heads = sum(f * k + k for k in self.head_sizes().values())
        return sum(s.param_count() for s in self.stages()) + heads


@dataclass(frozen=True)
class AugmenterArch:
    z_dim: int = Z_DIM
    code_dim: int = NUM_CLASSES
    seed_channels: int = 64
    widths: tuple[int, ...] = (32, 16)

    def seed_side(self) -> int:
        return IMAGE_SIZE // 2 ** (len(self.widths) + 1)

    def stages(self) -> list[ConvStage]:
        w = (self.seed_channels,) + self.widths + (1,)
        out = []
        for i in range(len(w) - 1):
            last = i == len(w) - 2
            out.append(ConvStage(f"up{i}", w[i], w[i + 1], transpose=True,
                                 batchnorm=not last, activation="sigmoid" if last else "relu"))
        return out

    def param_count(self) -> int:
        proj_out = self.seed_channels * self.seed_side() ** 2
        proj = (self.z_dim + self.code_dim) * proj_out + proj_out + 2 * proj_out
        return proj + sum(s.param_count() for s in self.stages())


def _alloc_stage(params: ParamSet, s: ConvStage) -> None:
    kshape = ((s.c_in, s.c_out) if s.transpose else (s.c_out, s.c_in)) + (s.kernel, s.kernel)
    params.add(f"{s.name}.weight", kshape)
    params.add(f"{s.name}.bias", (s.c_out,))
    if s.batchnorm:
        params.add(f"{s.name}.gamma", (s.c_out,))
        params.add(f"{s.name}.beta", (s.c_out,))
        params.add_stats(s.name, s.c_out)


def _run_stage(params: ParamSet, s: ConvStage, x: Tensor, train: bool, slope: float) -> Tensor:
    op = ad.conv2d_transpose if s.transpose else ad.conv2d
    h = op(x, params[f"{s.name}.weight"], params[f"{s.name}.bias"], s.stride, s.pad)
    if s.batchnorm:
        h = ad.batchnorm(h, params[f"{s.name}.gamma"], params[f"{s.name}.beta"],
                         params.stats[s.name], train=train)
    if s.activation == "leaky_relu":
        return ad.leaky_relu(h, slope)
    if s.activation == "relu":
        return ad.relu(h)
    return ad.sigmoid(h)


def _check_images(x: Tensor, who: str, size: int = IMAGE_SIZE) -> None:
    if x.ndim != 4 or x.shape[1:] != (1, size, size):
        raise ShapeError(f"{who} expects [N,1,{size},{size}] input, got {x.shape}")


class GeneratorNet:
    """Fully convolutional encoder/decoder mapping corrupted patches to clean ones."""

    def __init__(self, arch: GeneratorArch | None = None, seed: int = 0):
        self.arch = arch or GeneratorArch()
        self.params = ParamSet("generator")
        for s in self.arch.stages():
            _alloc_stage(self.params, s)
        init_weights(self.params, seed)
        self.train = True

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        _check_images(x, "generator", self.arch.image_size)
        h = x
        for s in self.arch.stages():
            h = _run_stage(self.params, s, h, self.train, self.arch.slope)
        return h


class DiscriminatorNet:
    """Shared conv trunk feeding three affine heads: real/fake, class, latent code."""

    def __init__(self, arch: DiscriminatorArch | None = None, seed: int = 0):
        self.arch = arch or DiscriminatorArch()
        self.params = ParamSet("discriminator")
        for s in self.arch.stages():
            _alloc_stage(self.params, s)
        f = self.arch.feature_dim()
        for head, k in self.arch.head_sizes().items():
            self.params.add(f"{head}.weight", (f, k))
            self.params.add(f"{head}.bias", (k,))
        init_weights(self.params, seed)
        self.train = True

    def __call__(self, x: Tensor):
        return self.forward(x)

    def features(self, x: Tensor) -> Tensor:
        _check_images(x, "discriminator")
        h = x
        for s in self.arch.stages():
            h = _run_stage(self.params, s, h, self.train, self.arch.slope)
        return ad.reshape(h, (h.shape[0], -1))

    def head(self, feats: Tensor, name: str) -> Tensor:
        return ad.linear(feats, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(real_prob [N], class_logits [N,K], mi_logits [N,K])``."""
        feats = self.features(x)
        gan = self.head(feats, "head_gan")
        real_prob = ad.sigmoid(ad.reshape(gan, (gan.shape[0],)))
        return real_prob, self.head(feats, "head_clc"), self.head(feats, "head_mi")


@dataclass
class LatentCode:
    c: np.ndarray  # [N, K] one-hot
    z: np.ndarray  # [N, Z]

    def __post_init__(self):
        self.c = np.atleast_2d(np.asarray(self.c, dtype=np.float64))
        self.z = np.atleast_2d(np.asarray(self.z, dtype=np.float64))
        ok = (np.all((self.c == 0) | (self.c == 1)) and np.all(self.c.sum(axis=1) == 1))
        if not ok:
            raise MalformedCodeError("categorical code rows must be one-hot")
        if self.c.shape[0] != self.z.shape[0]:
            raise MalformedCodeError(
                f"code batch {self.c.shape[0]} != noise batch {self.z.shape[0]}")
        if not np.all(np.isfinite(self.z)):
            raise MalformedCodeError("noise vector contains non-finite values")

    @property
    def labels(self) -> np.ndarray:
        return self.c.argmax(axis=1)

    @classmethod
    def sample(cls, labels, rng: np.random.Generator, z_dim: int = Z_DIM,
               num_classes: int = NUM_CLASSES) -> "LatentCode":
        labels = np.asarray(labels, dtype=np.intp)
        c = np.eye(num_classes)[labels]
        return cls(c, rng.standard_normal((len(labels), z_dim)))


class AugmentGeneratorNet:
    """(z, c) -> affine 4x4 seed map -> transposed convs -> 32x32 sigmoid image."""

    def __init__(self, arch: AugmenterArch | None = None, seed: int = 0):
        self.arch = arch or AugmenterArch()
        a = self.arch
        self.params = ParamSet("augmenter")
        proj_out = a.seed_channels * a.seed_side() ** 2
        self.params.add("proj.weight", (a.z_dim + a.code_dim, proj_out))
        self.params.add("proj.bias", (proj_out,))
        self.params.add("proj.gamma", (proj_out,))
        self.params.add("proj.beta", (proj_out,))
        self.params.add_stats("proj", proj_out)
        for s in a.stages():
            _alloc_stage(self.params, s)
        init_weights(self.params, seed)
        self.train = True

    def __call__(self, code: LatentCode) -> Tensor:
        return self.forward(code)

    def forward(self, code: LatentCode) -> Tensor:
        a = self.arch
        if code.c.shape[1] != a.code_dim or code.z.shape[1] != a.z_dim:
            raise MalformedCodeError(
                f"expected code dim {a.code_dim} and z dim {a.z_dim}, "
                f"got {code.c.shape[1]} and {code.z.shape[1]}")
        p = self.params
        inp = Tensor(np.concatenate([code.z, code.c], axis=1))
        h = ad.linear(inp, p["proj.weight"], p["proj.bias"])
        h = ad.batchnorm(h, p["proj.gamma"], p["proj.beta"], p.stats["proj"], train=self.train)
        h = ad.relu(h)
        side = a.seed_side()
        h = ad.reshape(h, (h.shape[0], a.seed_channels, side, side))
        for s in a.stages():
            h = _run_stage(p, s, h, self.train, 0.2)
        return h


@dataclass
class Models:
    """Every network a checkpoint carries.

    ``aug_discriminator`` is the adversary of the augmenter; it is kept apart
    from ``discriminator`` so augmentation training cannot disturb the
    classifier used by the deblur-and-classify path.
    """

    generator: GeneratorNet = field(default_factory=GeneratorNet)
    discriminator: DiscriminatorNet = field(default_factory=DiscriminatorNet)
    augmenter: AugmentGeneratorNet = field(default_factory=AugmentGeneratorNet)
    aug_discriminator: DiscriminatorNet = field(default_factory=DiscriminatorNet)

    @classmethod
    def fresh(cls, seed: int) -> "Models":
        return cls(GeneratorNet(seed=seed), DiscriminatorNet(seed=seed + 1),
                   AugmentGeneratorNet(seed=seed + 2), DiscriminatorNet(seed=seed + 3))

    def named(self) -> dict[str, object]:
        return {"generator": self.generator, "discriminator": self.discriminator,
                "augmenter": self.augmenter, "aug_discriminator": self.aug_discriminator}

    def set_train(self, flag: bool) -> None:
        for net in self.named().values():
            net.train = flag


def recalibrate_batchnorm(net, batches) -> None:
    """Replace the running statistics with the average of per-batch statistics.

    Each entry of ``batches`` is a network input (an image Tensor or a
    LatentCode). Short runs otherwise leave the statistics near their init
    values, since the EMA forgets only 10% of the old value per step.
    """
    stats = list(net.params.stats.values())
    saved = [s.momentum for s in stats]
    prev = net.train
    net.train = True
    try:
        with ad.no_grad():
            for k, b in enumerate(batches):
                for s in stats:
                    s.momentum = k / (k + 1)
                net(b)
    finally:
        for s, m in zip(stats, saved):
            s.momentum = m
        net.train = prev
