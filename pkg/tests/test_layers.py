import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from scenecnn.layers import LRN, Concat, Conv2D, Dense, Dropout, Pool2D, layer_from_config, softmax, softmax_xent
from scenecnn.tensor import ShapeError, make_rng


def conv(c, f, k, stride=1, pad=0, act="identity", w=None, b=None, dtype=np.float64):
    layer = Conv2D(c, f, k, stride=stride, padding=pad, activation=act)
    layer.params["weight"] = np.asarray(w if w is not None else np.zeros((f, c, k, k)), dtype=dtype)
    layer.params["bias"] = np.asarray(b if b is not None else np.zeros(f), dtype=dtype)
    return layer


def fd_check(layer, x, seed=0, tol=1e-6):
    """Backward of sum(y * r) against central differences for the input and every parameter."""
    y, _ = layer.forward([x])
    r = make_rng(seed).standard_normal(y.shape)

    def f(_):
        return float((layer.forward([x])[0] * r).sum())

    y, cache = layer.forward([x])
    (gx,), gp = layer.backward(cache, r)
    assert np.allclose(gx, oracles.central_difference(f, x), atol=tol, rtol=tol)
    for name, p in layer.params.items():
        assert np.allclose(gp[name], oracles.central_difference(f, p), atol=tol, rtol=tol), name


# ---------------------------------------------------------------- convolution

def test_conv_identity_kernel():
    x = make_rng(1).standard_normal((2, 1, 4, 5))
    y, _ = conv(1, 1, 1, w=[[[[1.0]]]]).forward([x])
    assert np.array_equal(y, x)


def test_conv_zero_kernel_gives_bias():
    y, _ = conv(2, 3, 3, b=[0.5, -1.0, 2.0]).forward([np.ones((1, 2, 5, 5))])
    assert y.shape == (1, 3, 3, 3)
    assert np.all(y[0, 0] == 0.5) and np.all(y[0, 1] == -1.0) and np.all(y[0, 2] == 2.0)


def test_conv_ramp_example():
    x = np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3)
    y, _ = conv(1, 1, 2, w=np.ones((1, 1, 2, 2))).forward([x])
    assert y[0, 0].tolist() == [[12.0, 16.0], [24.0, 28.0]]
    assert np.array_equal(y, oracles.conv2d(x, np.ones((1, 1, 2, 2)), [0.0]))


def test_conv_output_size_error():
    with pytest.raises(ShapeError):
        conv(1, 1, 5).forward([np.zeros((1, 1, 3, 3))])
    with pytest.raises(ShapeError):
        conv(2, 1, 1).forward([np.zeros((1, 3, 3, 3))])


def test_conv_bias_grad_is_per_filter_sum():
    rng = make_rng(2)
    layer = conv(2, 3, 3, pad=1, w=rng.standard_normal((3, 2, 3, 3)))
    y, cache = layer.forward([rng.standard_normal((2, 2, 4, 4))])
    gy = rng.standard_normal(y.shape)
    _, grads = layer.backward(cache, gy)
    assert np.allclose(grads["bias"], gy.sum(axis=(0, 2, 3)))


def test_conv_1x1_matches_dense_pixelwise():
    rng = make_rng(3)
    w = rng.standard_normal((4, 3, 1, 1))
    b = rng.standard_normal(4)
    layer = conv(3, 4, 1, w=w, b=b)
    x = rng.standard_normal((2, 3, 3, 3))
    y, cache = layer.forward([x])
    gy = rng.standard_normal(y.shape)
    (gx,), gc = layer.backward(cache, gy)

    dense = Dense(3, 4, "identity")
    dense.params = {"weight": w[:, :, 0, 0].copy(), "threshold": -b}
    pix = x.transpose(0, 2, 3, 1).reshape(-1, 3)
    yd, cd = dense.forward([pix])
    assert np.allclose(yd.reshape(2, 3, 3, 4).transpose(0, 3, 1, 2), y)
    (gxd,), gd = dense.backward(cd, gy.transpose(0, 2, 3, 1).reshape(-1, 4))
    assert np.allclose(gd["weight"], gc["weight"][:, :, 0, 0])
    assert np.allclose(-gd["threshold"], gc["bias"])
    assert np.allclose(gxd.reshape(2, 3, 3, 3).transpose(0, 3, 1, 2), gx)


@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
       st.integers(0, 1), st.integers(0, 2**31))
def test_conv_matches_oracle(n, c, f, k, stride, pad, seed):
    rng = make_rng(seed)
    h = w = k + 3
    weights, bias = rng.standard_normal((f, c, k, k)), rng.standard_normal(f)
    x = rng.standard_normal((n, c, h, w))
    y, _ = conv(c, f, k, stride, pad, "relu", weights, bias).forward([x])
    assert np.allclose(y, oracles.conv2d(x, weights, bias, stride, pad, relu=True), atol=1e-10)


@given(st.integers(1, 3), st.integers(1, 2), st.integers(0, 1), st.integers(0, 2**31))
def test_conv_backward_finite_differences(k, stride, pad, seed):
    rng = make_rng(seed)
    layer = conv(2, 2, k, stride, pad, w=rng.standard_normal((2, 2, k, k)), b=rng.standard_normal(2))
    fd_check(layer, rng.standard_normal((2, 2, k + 2, k + 3)), seed)


@given(st.integers(0, 2**31), st.integers(-3, 3), st.integers(-3, 3))
def test_conv_is_linear_in_input(seed, a, b):
    rng = make_rng(seed)
    w = rng.integers(-3, 4, (2, 2, 3, 3)).astype(np.float64)
    x = rng.integers(-5, 6, (1, 2, 5, 5)).astype(np.float64)
    z = rng.integers(-5, 6, (1, 2, 5, 5)).astype(np.float64)
    layer = conv(2, 2, 3, pad=1, w=w)
    lhs = layer.forward([a * x + b * z])[0]
    rhs = a * layer.forward([x])[0] + b * layer.forward([z])[0]
    assert np.array_equal(lhs, rhs)


@given(st.integers(0, 2**31), st.sampled_from([1, 3, 5]))
def test_conv_mirror_equivariance(seed, k):
    rng = make_rng(seed)
    w = rng.integers(-3, 4, (2, 3, k, k)).astype(np.float64)
    x = rng.integers(-5, 6, (1, 3, 6, 7)).astype(np.float64)
    plain = conv(3, 2, k, pad=k // 2, w=w)
    mirrored = conv(3, 2, k, pad=k // 2, w=w[..., ::-1])
    lhs = plain.forward([x[..., ::-1]])[0]
    rhs = mirrored.forward([x])[0][..., ::-1]
    assert np.array_equal(lhs, rhs)


# ---------------------------------------------------------------- pooling

@pytest.mark.parametrize("mode", ["max", "avg"])
def test_pool_constant_input(mode):
    y, _ = Pool2D(mode, 2, stride=2).forward([np.full((1, 2, 4, 4), 3.5)])
    assert np.all(y == 3.5)


def test_max_pool_ramp_example():
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    y, _ = Pool2D("max", 2, stride=2).forward([x])
    assert y[0, 0].tolist() == [[6.0, 8.0], [14.0, 16.0]]


@pytest.mark.parametrize("mode,expected", [("max", 16.0), ("avg", 8.5)])
def test_full_window_pool(mode, expected):
    x = np.arange(1, 17, dtype=np.float64).reshape(1, 1, 4, 4)
    y, _ = Pool2D(mode, 4, stride=1).forward([x])
    assert y.shape == (1, 1, 1, 1) and y.item() == expected


def test_max_pool_ties_break_to_first_index():
    layer = Pool2D("max", 2, stride=2)
    assert layer.argmax_indices(np.ones((1, 1, 2, 2))).item() == 0
    x = np.array([[[[0.0, 5.0], [5.0, 5.0]]]])
    assert layer.argmax_indices(x).item() == 1
    _, cache = layer.forward([x])
    (gx,), _ = layer.backward(cache, np.ones((1, 1, 1, 1)))
    assert gx[0, 0].tolist() == [[0.0, 1.0], [0.0, 0.0]]


def test_pool_padding_never_selected():
    y, _ = Pool2D("max", 3, stride=2, padding=1).forward([np.full((1, 1, 4, 4), -7.0)])
    assert y.shape == (1, 1, 2, 2) and np.all(y == -7.0)


@given(st.sampled_from(["max", "avg"]), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1),
       st.integers(0, 2**31))
def test_pool_matches_oracle(mode, k, stride, pad, seed):
    pad = min(pad, k - 1)
    x = make_rng(seed).standard_normal((2, 2, k + 3, k + 2))
    y, cache = Pool2D(mode, k, stride=stride, padding=pad).forward([x])
    ref, arg = oracles.pool2d(x, mode, k, k, stride, pad)
    assert np.allclose(y, ref, atol=1e-12)
    if mode == "max":
        assert np.array_equal(cache[1], arg)


@given(st.sampled_from(["max", "avg"]), st.integers(0, 2**31))
def test_pool_backward_finite_differences(mode, seed):
    # distinct, well-separated values keep every max-pool winner stable under the perturbation
    x = make_rng(seed).permutation(2 * 2 * 5 * 5).reshape(2, 2, 5, 5) * 0.1
    fd_check(Pool2D(mode, 3, stride=2, padding=1), x.astype(np.float64), seed)


@given(st.integers(0, 2**31), st.integers(0, 1), st.integers(0, 1))
def test_max_pool_translation_tolerance(seed, di, dj):
    rng = make_rng(seed)
    x = rng.uniform(0, 1, (1, 1, 4, 4))
    x[0, 0, 0, 0] = 5.0
    moved = x.copy()
    moved[0, 0, 0, 0], moved[0, 0, di, dj] = moved[0, 0, di, dj], 5.0
    layer = Pool2D("max", 2, stride=2)
    assert layer.forward([x])[0][0, 0, 0, 0] == layer.forward([moved])[0][0, 0, 0, 0] == 5.0


# ---------------------------------------------------------------- LRN

def test_lrn_neutral_parameters_are_identity():
    x = make_rng(4).standard_normal((2, 6, 3, 3))
    y, _ = LRN(5, alpha=0.0, beta=0.75, k=1.0).forward([x])
    assert np.array_equal(y, x)


def test_lrn_hand_value():
    y, _ = LRN(1, alpha=1.0, beta=1.0, k=1.0).forward([np.full((1, 1, 1, 1), 2.0)])
    assert y.item() == pytest.approx(0.4, abs=1e-15)


@given(st.integers(1, 7), st.integers(1, 6), st.floats(1e-4, 2.0), st.floats(0.1, 1.5), st.floats(0.5, 3.0),
       st.integers(0, 2**31))
def test_lrn_matches_oracle_and_keeps_sign(size, c, alpha, beta, k, seed):
    x = make_rng(seed).standard_normal((2, c, 2, 3))
    y, _ = LRN(size, alpha, beta, k).forward([x])
    assert np.allclose(y, oracles.lrn(x, size, alpha, beta, k), atol=1e-12)
    assert np.array_equal(np.sign(y), np.sign(x))


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_lrn_backward_finite_differences(size, seed):
    fd_check(LRN(size, alpha=0.5, beta=0.75, k=2.0), make_rng(seed).standard_normal((2, 5, 2, 2)), seed)


# ---------------------------------------------------------------- dense

def test_dense_identity():
    layer = Dense(3, 3, "identity")
    layer.params = {"weight": np.eye(3), "threshold": np.zeros(3)}
    x = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(layer.forward([x])[0], x)


def test_dense_threshold_is_subtracted():
    layer = Dense(2, 1, "relu")
    layer.params = {"weight": np.array([[2.0, 0.5]]), "threshold": np.array([0.5])}
    assert layer.forward([np.array([[1.0, -1.0]])])[0].item() == 1.0
    layer.params["threshold"] = np.array([100.0])
    assert layer.forward([make_rng(0).standard_normal((5, 2))])[0].max() == 0.0


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_dense_matches_oracle(i, o, seed):
    rng = make_rng(seed)
    layer = Dense(i, o, "relu")
    layer.params = {"weight": rng.standard_normal((o, i)), "threshold": rng.standard_normal(o)}
    x = rng.standard_normal((3, i))
    assert np.allclose(layer.forward([x])[0], oracles.dense(x, *layer.params.values(), relu=True), atol=1e-12)


def test_dense_backward_finite_differences():
    rng = make_rng(5)
    layer = Dense(12, 4, "identity")
    layer.params = {"weight": rng.standard_normal((4, 12)), "threshold": rng.standard_normal(4)}
    fd_check(layer, rng.standard_normal((3, 3, 2, 2)))


# ---------------------------------------------------------------- softmax

def test_softmax_examples():
    p, loss, _ = softmax_xent(np.zeros((1, 4)), [2])
    assert np.allclose(p, 0.25) and loss == pytest.approx(math.log(4))
    p = softmax(np.array([[0.0, math.log(3.0)]]))
    assert np.allclose(p, [[0.25, 0.75]], atol=1e-15)


@given(st.integers(1, 5), st.integers(2, 6), st.floats(-50, 50), st.integers(0, 2**31))
def test_softmax_shift_invariance_and_gradient(n, k, shift, seed):
    rng = make_rng(seed)
    z = rng.standard_normal((n, k)) * 3
    labels = rng.integers(0, k, n)
    p, loss, g = softmax_xent(z, labels)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
    assert np.allclose(softmax(z + shift), p, atol=1e-7)
    assert np.allclose(p, oracles.softmax(z), atol=1e-12)
    assert loss == pytest.approx(oracles.xent(z, labels), abs=1e-12)
    onehot = np.eye(k)[labels]
    assert np.allclose(g, (p - onehot) / n, atol=1e-15)


def test_softmax_extreme_logits_are_finite():
    p, loss, _ = softmax_xent(np.array([[1000.0, -1000.0]]), [0])
    assert np.isfinite(p).all() and loss == pytest.approx(0.0)


def test_softmax_label_out_of_range():
    with pytest.raises(ValueError):
        softmax_xent(np.zeros((2, 3)), [0, 3])


# ---------------------------------------------------------------- concat and dropout

def test_concat_channel_arithmetic_and_slices():
    rng = make_rng(6)
    xs = [rng.standard_normal((2, c, 3, 3)) for c in (16, 32, 8, 8)]
    y, cache = Concat().forward(xs)
    assert y.shape[1] == 64
    bounds = np.cumsum([0, 16, 32, 8, 8])
    for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
        assert y[:, lo:hi].tobytes() == x.tobytes()
    grads, _ = Concat().backward(cache, y)
    assert all(np.array_equal(g, x) for g, x in zip(grads, xs))
    assert np.array_equal(Concat().forward(xs[:1])[0], xs[0])


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        Concat().forward([np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 2, 3))])
    with pytest.raises(ShapeError):
        Concat().output_shape([(1, 3, 3), (2, 3, 2)])


def test_dropout_eval_identity_and_p_zero():
    x = make_rng(7).standard_normal((4, 10))
    assert Dropout(0.5).forward([x], train=False)[0] is x
    assert np.array_equal(Dropout(0.0).forward([x], train=True, key=(1,))[0], x)


def test_dropout_rate_and_scaling():
    layer = Dropout(0.3, seed=11)
    y, mask = layer.forward([np.ones(100_000)], train=True, key=(0, 0))
    assert abs(np.mean(y == 0) - 0.3) < 0.01
    assert np.allclose(y[y != 0], 1 / 0.7)
    again, _ = layer.forward([np.ones(100_000)], train=True, key=(0, 0))
    assert np.array_equal(y, again)
    other, _ = layer.forward([np.ones(100_000)], train=True, key=(0, 1))
    assert not np.array_equal(y, other)


def test_layer_config_round_trip():
    for layer in (Conv2D(3, 4, 3, 5, stride=2, padding=1), Pool2D("avg", 3, stride=2, padding=1), LRN(3, 0.1),
                  Dropout(0.2, 5), Dense(7, 2, "identity"), Concat()):
        clone = layer_from_config(layer.kind, layer.config())
        assert type(clone) is type(layer) and clone.config() == layer.config()
    with pytest.raises(ValueError):
        layer_from_config("lambda", {})
