import itertools

import numpy as np
import pytest
import hypothesis.extra.numpy as hnp
import hypothesis.strategies as st
from hypothesis import given, settings

from markgan import autodiff as ad
from markgan.autodiff import DegenerateBatchError, RunningStats, ShapeError, Tensor
from markgan.gradcheck import check_params
from markgan.losses import mse_loss
from markgan.models import GeneratorArch, GeneratorNet

import oracles


def rnd(seed, *shape, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def grad_of(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        ad.backward(fn(*ts), tape)
    return [t.grad for t in ts]


def fd_check(fn, *arrays, h=1e-4, tol=1e-3):
    """Tape gradient of ``fn`` against central differences at every element."""
    grads = grad_of(fn, *arrays)
    for k, g in enumerate(grads):
        work = [a.copy() for a in arrays]

        def f():
            with ad.no_grad():
                return fn(*[Tensor(a) for a in work]).item()
        for idx in np.ndindex(work[k].shape):
            num = oracles.central_difference(f, work[k], idx, h)
            assert oracles.rel_error(g[idx], num) < tol, (k, idx, g[idx], num)


# ------------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = rnd(0, 1, 1, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_kernel():
    x = rnd(1, 2, 3, 7, 7)
    out = ad.conv2d(Tensor(x), Tensor(np.zeros((4, 3, 3, 3))), Tensor(np.zeros(4)), 2, 1)
    assert not out.data.any()


def test_conv_matches_naive_reference_case():
    # 8x8 with k=3, s=2, p=1 gives a fractional output size and is rejected; 9x9 fits
    k, b = rnd(3, 4, 3, 3, 3), rnd(4, 4)
    with pytest.raises(ShapeError):
        ad.conv2d(Tensor(rnd(2, 2, 3, 8, 8)), Tensor(k), Tensor(b), stride=2, pad=1)
    x = rnd(2, 2, 3, 9, 9)
    out = ad.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=2, pad=1)
    assert out.shape == (2, 4, 5, 5)
    assert np.abs(out.data - oracles.naive_conv2d(x, k, b, 2, 1)).max() < 1e-12


def _sizes(stride, pad, k):
    """An input size giving an integral output for this geometry."""
    for h in range(5, 12):
        if (h + 2 * pad - k) % stride == 0 and h + 2 * pad >= k:
            return h
    raise AssertionError


GEOMS = list(itertools.product((1, 2), (0, 1), (1, 3, 4)))


@pytest.mark.parametrize("stride,pad,k", GEOMS)
def test_conv_naive_grid(stride, pad, k):
    h = _sizes(stride, pad, k)
    x, w, b = rnd(5, 2, 2, h, h), rnd(6, 3, 2, k, k), rnd(7, 3)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    assert np.abs(out.data - oracles.naive_conv2d(x, w, b, stride, pad)).max() < 1e-12


@pytest.mark.parametrize("stride,pad,k", GEOMS)
def test_conv_transpose_naive_grid(stride, pad, k):
    if 2 * pad >= k + 2 * stride:
        pytest.skip("empty output")
    x, w, b = rnd(8, 2, 3, 4, 5), rnd(9, 3, 2, k, k), rnd(10, 2)
    out = ad.conv2d_transpose(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    ref = oracles.naive_conv2d_transpose(x, w, b, stride, pad)
    assert out.shape == ref.shape
    assert np.abs(out.data - ref).max() < 1e-12


@pytest.mark.parametrize("stride,pad,k", GEOMS)
def test_adjoint_identity(stride, pad, k):
    h = _sizes(stride, pad, k)
    x, w = rnd(11, 2, 3, h, h), rnd(12, 4, 3, k, k)
    zero_f, zero_c = Tensor(np.zeros(4)), Tensor(np.zeros(3))
    y_shape = ad.conv2d(Tensor(x), Tensor(w), zero_f, stride, pad).shape
    y = rnd(13, *y_shape)
    lhs = (ad.conv2d(Tensor(x), Tensor(w), zero_f, stride, pad).data * y).sum()
    back = ad.conv2d_transpose(Tensor(y), Tensor(w), zero_c, stride, pad)
    assert back.shape == x.shape
    assert abs(lhs - (x * back.data).sum()) < 1e-10


def test_conv_transpose_broadcast_case():
    out = ad.conv2d_transpose(Tensor(np.full((1, 1, 1, 1), 0.7)), Tensor(np.ones((1, 1, 2, 2))),
                              Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 0.7))


def test_conv_transpose_zero_input():
    out = ad.conv2d_transpose(Tensor(np.zeros((1, 2, 4, 4))), Tensor(rnd(0, 2, 3, 4, 4)),
                              Tensor(np.zeros(3)), 2, 1)
    assert out.shape == (1, 3, 8, 8) and not out.data.any()


def test_conv_channel_mismatch_names_dims():
    with pytest.raises(ShapeError, match="C=3"):
        ad.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros(2)))


def test_conv_non_integral_output():
    with pytest.raises(ShapeError, match="non-integral"):
        ad.conv2d(Tensor(np.zeros((1, 1, 6, 6))), Tensor(np.zeros((1, 1, 3, 3))),
                  Tensor(np.zeros(1)), stride=2, pad=0)


def test_conv_transpose_mismatch():
    with pytest.raises(ShapeError):
        ad.conv2d_transpose(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 1, 4, 4))),
                            Tensor(np.zeros(1)))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 0, 1)])
def test_conv_gradients_fd(stride, pad, k):
    h = _sizes(stride, pad, k)
    x, w, b = rnd(14, 1, 2, h, h), rnd(15, 2, 2, k, k), rnd(16, 2)
    y = rnd(17, *ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).shape)
    fd_check(lambda x, w, b: ad.sum(ad.mul(ad.conv2d(x, w, b, stride, pad), Tensor(y))), x, w, b)


def test_conv_transpose_gradients_fd():
    x, w, b = rnd(18, 1, 2, 3, 3), rnd(19, 2, 3, 4, 4), rnd(20, 3)
    y = rnd(21, 1, 3, 6, 6)
    fd_check(lambda x, w, b: ad.sum(ad.mul(ad.conv2d_transpose(x, w, b, 2, 1), Tensor(y))), x, w, b)


# ---------------------------------------------------------------- batchnorm


def _bn(x, train=True, stats=None, gamma=None, beta=None):
    c = x.shape[1]
    stats = stats or RunningStats.fresh(c)
    g = Tensor(np.ones(c) if gamma is None else gamma)
    b = Tensor(np.zeros(c) if beta is None else beta)
    return ad.batchnorm(Tensor(x), g, b, stats, train=train), stats


def test_batchnorm_constant_channel_collapses():
    out, _ = _bn(np.full((4, 2, 3, 3), 3.7))
    assert np.abs(out.data).max() < 1e-2


def test_batchnorm_statistics():
    x = rnd(22, 5, 3, 4, 4, lo=-12, hi=10)
    out, _ = _bn(x)
    m = out.data.mean(axis=(0, 2, 3))
    v = out.data.var(axis=(0, 2, 3))
    assert np.abs(m).max() < 1e-10
    # biased variance: output variance is var/(var+eps), just under one
    var_in = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(v, var_in / (var_in + 1e-5), atol=1e-12)
    assert np.abs(v - 1).max() < 1e-6


def test_batchnorm_eval_closed_form():
    stats = RunningStats(np.array([0.5, -1.0]), np.array([2.0, 0.25]))
    x = rnd(23, 2, 2, 2, 2)
    gamma, beta = np.array([1.5, -0.5]), np.array([0.1, 0.2])
    out, _ = _bn(x, train=False, stats=stats, gamma=gamma, beta=beta)
    for n, c, i, j in np.ndindex(x.shape):
        want = gamma[c] * (x[n, c, i, j] - stats.mean[c]) / np.sqrt(stats.var[c] + 1e-5) + beta[c]
        assert abs(out.data[n, c, i, j] - want) < 1e-14


def test_batchnorm_running_stats_ema():
    x = rnd(24, 6, 2, 3, 3)
    _, stats = _bn(x)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-15)
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-15)


def test_batchnorm_eval_leaves_stats():
    stats = RunningStats.fresh(2)
    _bn(rnd(25, 3, 2, 2, 2), train=False, stats=stats)
    assert not stats.mean.any() and (stats.var == 1).all()


def test_batchnorm_degenerate():
    with pytest.raises(DegenerateBatchError):
        _bn(np.zeros((1, 2, 1, 1)))
    with pytest.raises(DegenerateBatchError):
        _bn(np.zeros((1, 4)))


def test_batchnorm_gradients_fd():
    x = rnd(26, 3, 2, 2, 2)
    y = rnd(27, 3, 2, 2, 2)
    fd_check(lambda x, g, b: ad.sum(ad.mul(
        ad.batchnorm(x, g, b, RunningStats.fresh(2)), Tensor(y))), x, rnd(28, 2), rnd(29, 2))


def test_batchnorm_2d_gradients_fd():
    y = rnd(30, 4, 3)
    fd_check(lambda x, g, b: ad.sum(ad.mul(
        ad.batchnorm(x, g, b, RunningStats.fresh(3)), Tensor(y))), rnd(31, 4, 3), rnd(32, 3), rnd(33, 3))


# -------------------------------------------------------------- activations


def test_softmax_uniform():
    np.testing.assert_array_equal(ad.softmax(Tensor(np.zeros(10))).data, np.full(10, 0.1))


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor(np.array(0.0))).item() == 0.5


def test_sigmoid_extreme_is_finite():
    out = ad.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.isfinite(out).all() and out[0] == 0.0 and out[1] == 1.0


@pytest.mark.parametrize("x0,want", [(-1.0, 0.0), (1.0, 1.0)])
def test_relu_gradient(x0, want):
    (g,) = grad_of(lambda x: ad.sum(ad.relu(x)), np.array([x0]))
    assert g[0] == want
    num = oracles.central_difference(lambda: ad.relu(Tensor(a)).item(), a := np.array(x0), (), 1e-4)
    assert abs(num - want) < 1e-12


def test_leaky_relu_values():
    out = ad.leaky_relu(Tensor(np.array([-2.0, 3.0])), 0.2).data
    np.testing.assert_allclose(out, [-0.4, 3.0])


@pytest.mark.parametrize("fn", [ad.relu, ad.leaky_relu, ad.sigmoid])
def test_activations_propagate_nan(fn):
    assert np.isnan(fn(Tensor(np.array([np.nan, 1.0]))).data[0])


def _away_from_kinks(a):
    return np.where(np.abs(a) < 1e-3, 0.5, a)


@pytest.mark.parametrize("op", [
    lambda x: ad.relu(x),
    lambda x: ad.leaky_relu(x, 0.2),
    lambda x: ad.sigmoid(x),
    lambda x: ad.softmax(x, axis=1),
    lambda x: ad.log_softmax(x, axis=0),
    lambda x: ad.square(x),
    lambda x: ad.log(ad.add(ad.square(x), Tensor(np.array(0.5)))),
])
def test_activation_gradients_fd(op):
    x = _away_from_kinks(rnd(34, 3, 4))
    y = rnd(35, 3, 4)
    fd_check(lambda x: ad.sum(ad.mul(op(x), Tensor(y))), x)


def test_log_floor_clamps_and_blocks_gradient():
    (g,) = grad_of(lambda x: ad.sum(ad.log(x, floor=1e-3)), np.array([0.0, 0.5]))
    assert g[0] == 0.0 and g[1] == pytest.approx(2.0)


def test_reductions_and_shapes_fd():
    x = rnd(36, 2, 3, 4)
    w = rnd(37, 12, 5)
    b = rnd(38, 5)
    fd_check(lambda x, w, b: ad.mean(ad.square(ad.linear(ad.reshape(x, (2, 12)), w, b))), x, w, b)
    fd_check(lambda x: ad.sum(ad.square(ad.concat([ad.take(x, slice(0, 1)), x]))), x)
    fd_check(lambda x: ad.sum(ad.mul(ad.mean(x, axis=1), Tensor(rnd(39, 2, 4)))), x)
    fd_check(lambda x: ad.sum(ad.square(ad.take(x, np.array([1, 1, 0])))), x)


def test_broadcasting_gradients_fd():
    fd_check(lambda a, b: ad.sum(ad.square(ad.sub(ad.mul(a, b), b))), rnd(40, 3, 4), rnd(41, 1, 4))


# ----------------------------------------------------------------- backward


def test_sum_of_squares_gradient():
    x = rnd(42, 7)
    (g,) = grad_of(lambda t: ad.sum(ad.square(t)), x)
    np.testing.assert_array_equal(g, 2 * x)


def test_non_scalar_loss_rejected():
    x = Tensor(rnd(43, 3), requires_grad=True)
    with ad.Tape() as tape:
        y = ad.square(x)
        with pytest.raises(ShapeError, match="scalar"):
            ad.backward(y, tape)


def test_empty_tape_rejected():
    with pytest.raises(RuntimeError):
        ad.backward(Tensor(np.array(1.0)), ad.Tape())


def test_tape_consumed():
    x = Tensor(rnd(44, 3), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.sum(ad.square(x))
        assert len(tape) == 2
        ad.backward(loss, tape)
        assert len(tape) == 0


def test_gradients_accumulate():
    x = Tensor(rnd(45, 4), requires_grad=True)
    for _ in range(2):
        with ad.Tape() as tape:
            ad.backward(ad.sum(ad.square(ad.relu(x))), tape)
    single = grad_of(lambda t: ad.sum(ad.square(ad.relu(t))), rnd(45, 4))[0]
    np.testing.assert_array_equal(x.grad, 2 * single)


def test_shared_subgraph_accumulates():
    # D applied to two inputs shares parameters; both paths reach the weight
    (gw,) = grad_of(lambda w: ad.add(ad.sum(ad.mul(w, Tensor(np.full(3, 2.0)))),
                                     ad.sum(ad.mul(w, Tensor(np.full(3, 5.0))))), rnd(46, 3))
    np.testing.assert_array_equal(gw, np.full(3, 7.0))


def test_no_grad_records_nothing():
    x = Tensor(rnd(47, 3), requires_grad=True)
    with ad.Tape() as tape, ad.no_grad():
        y = ad.sum(ad.square(x))
    assert len(tape) == 0 and not y.requires_grad


def _gen_grads(seed):
    G = GeneratorNet(GeneratorArch(widths=(2, 3), image_size=8), seed=seed)
    x = Tensor(rnd(seed, 4, 1, 8, 8, lo=0, hi=1))
    t = Tensor(rnd(seed + 1, 4, 1, 8, 8, lo=0, hi=1))
    with ad.Tape() as tape:
        ad.backward(mse_loss(G(x), t), tape)
    return {k: p.grad.copy() for k, p in G.params}


def test_backward_bit_identical():
    a, b = _gen_grads(3), _gen_grads(3)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_tiny_generator_every_parameter_fd():
    G = GeneratorNet(GeneratorArch(widths=(2, 3), image_size=8), seed=1)
    # larger weights than the training init so the loss is not flat
    for _, p in G.params:
        p.data += np.random.default_rng(2).normal(0, 0.3, size=p.shape)
    x = Tensor(rnd(3, 4, 1, 8, 8, lo=-1, hi=1))
    t = Tensor(rnd(4, 4, 1, 8, 8, lo=0, hi=1))
    results = check_params(lambda: mse_loss(G(x), t), G.params, "generator",
                           np.random.default_rng(0), coords=None)
    assert sum(r.checked for r in results) == G.params.count() - sum(r.skipped_kink for r in results)
    for r in results:
        assert r.checked > 0, r
        assert r.max_rel_error < 1e-3, r


# --------------------------------------------------------------- properties


finite = st.floats(-1, 1, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=finite))
def test_softmax_rows_sum_to_one(a):
    # logit spread <= 20 keeps every probability strictly inside (0, 1) in float64
    s = ad.softmax(Tensor(a * 10), axis=1).data
    assert (s > 0).all() and (s < 1).all() or a.shape[1] == 1
    assert np.abs(s.sum(axis=1) - 1).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 2), st.integers(0, 1), st.sampled_from([1, 3, 4]), st.integers(0, 2**31 - 1),
       st.integers(1, 3), st.integers(1, 3))
def test_adjoint_property(stride, pad, k, seed, c, f):
    h = _sizes(stride, pad, k)
    x, w = rnd(seed, 1, c, h, h), rnd(seed + 1, f, c, k, k)
    y_shape = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(f)), stride, pad).shape
    y = rnd(seed + 2, *y_shape)
    lhs = (ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(f)), stride, pad).data * y).sum()
    rhs = (x * ad.conv2d_transpose(Tensor(y), Tensor(w), Tensor(np.zeros(c)), stride, pad).data).sum()
    assert abs(lhs - rhs) < 1e-10


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite))
def test_forward_backward_finite(a):
    (g,) = grad_of(lambda x: ad.sum(ad.log_softmax(ad.sigmoid(ad.leaky_relu(x)), axis=1)), a)
    assert np.isfinite(g).all()
