import numpy as np
import pytest

from markgan import autodiff as ad
from markgan.autodiff import ShapeError, Tensor
from markgan.losses import MalformedCodeError
from markgan.models import (AugmenterArch, AugmentGeneratorNet, DiscriminatorArch,
                            DiscriminatorNet, GeneratorArch, GeneratorNet, LatentCode, Models)


def images(n, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (n, 1, 32, 32)))


@pytest.fixture(scope="module")
def G():
    return GeneratorNet(seed=0)


@pytest.fixture(scope="module")
def D():
    return DiscriminatorNet(seed=1)


def test_generator_shape_and_range(G):
    out = G(images(4))
    assert out.shape == (4, 1, 32, 32)
    assert (out.data > 0).all() and (out.data < 1).all()


@pytest.mark.parametrize("n", [2, 3, 7])
def test_generator_preserves_shape_for_any_batch(G, n):
    assert G(images(n)).shape == (n, 1, 32, 32)


def test_generator_last_stage_has_no_batchnorm():
    stages = GeneratorArch().stages()
    assert not stages[-1].batchnorm and stages[-1].activation == "sigmoid"
    assert all(s.batchnorm for s in stages[:-1])
    assert [s.activation for s in stages[:3]] == ["leaky_relu"] * 3
    assert [s.activation for s in stages[3:5]] == ["relu"] * 2


def test_generator_shape_error(G):
    with pytest.raises(ShapeError):
        G(Tensor(np.zeros((2, 1, 28, 28))))
    with pytest.raises(ShapeError):
        G(Tensor(np.zeros((2, 3, 32, 32))))


def test_discriminator_heads(D):
    prob, clc, mi = D(images(6))
    assert prob.shape == (6,) and clc.shape == (6, 10) and mi.shape == (6, 10)
    assert (prob.data > 0).all() and (prob.data < 1).all()
    sm = ad.softmax(clc, axis=1).data
    assert np.abs(sm.sum(axis=1) - 1).max() < 1e-12


def test_discriminator_fresh_init_near_chance(D):
    D.train = False
    try:
        prob, clc, _ = D(images(16, seed=3))
    finally:
        D.train = True
    assert np.abs(prob.data - 0.5).max() < 0.05
    assert ad.softmax(clc, axis=1).data.max() < 0.2


def test_discriminator_first_stage_has_no_batchnorm():
    stages = DiscriminatorArch().stages()
    assert not stages[0].batchnorm and all(s.batchnorm for s in stages[1:])


def test_head_independence():
    D = DiscriminatorNet(seed=4)
    x = images(4, seed=5)
    p0 = D(x)[0].data.copy()
    D.params["head_clc.weight"].data += 1.0
    D.params["head_mi.bias"].data -= 2.0
    assert np.array_equal(D(x)[0].data, p0)


def test_param_counts_match_descriptors():
    assert GeneratorNet().params.count() == GeneratorArch().param_count()
    assert DiscriminatorNet().params.count() == DiscriminatorArch().param_count()
    assert AugmentGeneratorNet().params.count() == AugmenterArch().param_count()
    small = GeneratorArch(widths=(4, 8), image_size=16)
    assert GeneratorNet(small).params.count() == small.param_count()


def test_eval_mode_deterministic(G):
    G.train = False
    try:
        x = images(3, seed=9)
        assert np.array_equal(G(x).data, G(x).data)
    finally:
        G.train = True


def test_latent_code_validation():
    with pytest.raises(MalformedCodeError):
        LatentCode(np.array([[0.5, 0.5] + [0] * 8]), np.zeros((1, 64)))
    with pytest.raises(MalformedCodeError):
        LatentCode(np.eye(10)[:2] * 2, np.zeros((2, 64)))
    with pytest.raises(MalformedCodeError):
        LatentCode(np.eye(10)[:2], np.zeros((3, 64)))
    with pytest.raises(MalformedCodeError):
        LatentCode(np.eye(10)[:1], np.full((1, 64), np.nan))
    code = LatentCode.sample([4, 1], np.random.default_rng(0))
    assert list(code.labels) == [4, 1] and code.z.shape == (2, 64)


def test_augmenter_deterministic_and_in_range():
    A = AugmentGeneratorNet(seed=2)
    A.train = False
    code = LatentCode.sample(np.arange(10), np.random.default_rng(1))
    a, b = A(code).data, A(code).data
    assert a.shape == (10, 1, 32, 32)
    assert np.array_equal(a, b)
    assert (a > 0).all() and (a < 1).all()


def test_augmenter_single_sample_in_eval():
    A = AugmentGeneratorNet(seed=2)
    A.train = False
    assert A(LatentCode.sample([3], np.random.default_rng(0))).shape == (1, 1, 32, 32)


def test_augmenter_dimension_check():
    A = AugmentGeneratorNet(seed=2)
    with pytest.raises(MalformedCodeError):
        A(LatentCode(np.eye(10)[:2], np.zeros((2, 16))))


def test_models_fresh_distinct_seeds():
    m = Models.fresh(0)
    assert not np.array_equal(m.discriminator.params["trunk0.weight"].data,
                              m.aug_discriminator.params["trunk0.weight"].data)
    m.set_train(False)
    assert not any(net.train for net in m.named().values())


def test_recalibrate_batchnorm_matches_batch_stats():
    from markgan.models import recalibrate_batchnorm
    D = DiscriminatorNet(seed=0)
    x = images(16, seed=2)
    recalibrate_batchnorm(D, [x])
    assert all(s.momentum == 0.9 for s in D.params.stats.values()) and D.train
    D.train = False
    eval_out = D(x)[1].data
    D.train = True
    train_out = D(x)[1].data
    # a single batch: eval-mode stats equal that batch's statistics
    assert np.abs(eval_out - train_out).max() < 1e-9
