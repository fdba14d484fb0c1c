import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from conftest import tiny_caffenet, tiny_googlenet
from scenecnn.architectures import build_linear_net, build_mini_caffenet
from scenecnn.autodiff import backward, check_gradients, forward, gradient_check, network_loss
from scenecnn.graph import NetworkGraph
from scenecnn.layers import Conv2D, Dense, Pool2D
from scenecnn.tensor import ShapeError, make_rng


def single_fc(w, theta):
    net = NetworkGraph((len(w[0]),))
    layer = Dense(len(w[0]), len(w), "identity")
    layer.params = {"weight": np.array(w, dtype=np.float64), "threshold": np.array(theta, dtype=np.float64)}
    net.main_head = net.add("fc", layer)
    return net


def test_identity_network_forward():
    logits, _ = forward(single_fc(np.eye(2), [0.0, 0.0]), np.array([[1.0, 2.0]]))
    assert logits[0].tolist() == [[1.0, 2.0]]


def test_single_fc_hand_gradient():
    x1, x2 = 0.7, -1.3
    net = single_fc([[0.2, 0.4]], [0.1])
    _, tape = forward(net, np.array([[x1, x2]]))
    grads = backward(tape, [np.ones((1, 1))])
    assert grads["fc.weight"].tolist() == [[x1, x2]]
    assert grads["fc.threshold"].tolist() == [-1.0]


def test_head_counting():
    x = np.zeros((2, 3, 8, 8), dtype=np.float32)
    assert len(forward(tiny_googlenet(use_aux=True), x)[0]) == 2
    assert len(forward(tiny_googlenet(use_aux=False), x)[0]) == 1


def test_caffenet_shapes_match_oracle_table():
    net = build_mini_caffenet((3, 64, 64), 21, width_scale=0.25)
    x = make_rng(0).standard_normal((2, 3, 64, 64)).astype(np.float32)
    logits, tape = forward(net, x)
    assert logits[0].shape == (2, 21)
    table = oracles.caffenet_shape_table(3, 64, 64, [4, 8, 12, 12, 8], 21)
    for name, shape in table.items():
        assert tape.value(name).shape[1:] == shape, name
    assert {k: v for k, v in net.shapes().items() if k in table} == table


def test_forward_shape_errors_name_the_layer():
    net = NetworkGraph((1, 4, 4))
    net.add("conv", Conv2D(1, 2, 3))
    net.add("pool", Pool2D("max", 3, stride=1), "conv")
    net.main_head = net.add("fc", Dense(2, 2), "pool")
    with pytest.raises(ShapeError, match="pool"):
        forward(net, np.zeros((1, 1, 4, 4)))
    with pytest.raises(ShapeError, match="input shape"):
        forward(net, np.zeros((1, 1, 5, 4)))


def test_backward_without_tape():
    with pytest.raises(RuntimeError):
        backward(None, [np.zeros((1, 2))])


def test_all_frozen_gives_empty_gradient_set():
    net = tiny_caffenet()
    x = make_rng(1).standard_normal((2, 3, 16, 16)).astype(np.float32)
    logits, tape = forward(net, x, "train", (0,))
    _, _, g = network_loss(net, logits, [0, 1])
    assert backward(tape, g, frozen=net.param_layers()) == {}


def test_aux_weight_zero_matches_single_head():
    with_aux = tiny_googlenet(use_aux=True, seed=3, dtype=np.float64)
    plain = tiny_googlenet(use_aux=False, seed=3, dtype=np.float64)
    with_aux.aux_heads = {k: 0.0 for k in with_aux.aux_heads}
    x = make_rng(2).standard_normal((3, 3, 8, 8))
    labels = [0, 2, 1]
    grads = []
    for net in (with_aux, plain):
        logits, tape = forward(net, x, "train", (5,))
        _, _, g = network_loss(net, logits, labels)
        grads.append(backward(tape, g))
    for name, g in grads[1].items():
        assert np.array_equal(grads[0][name], g), name


def test_frozen_layer_still_propagates():
    net = tiny_caffenet(dtype=np.float64)
    x = make_rng(3).standard_normal((2, 3, 16, 16))
    logits, tape = forward(net, x, "train", (1,))
    _, _, g = network_loss(net, logits, [1, 2])
    full = backward(tape, g)
    part = backward(tape, g, frozen={"conv3", "fc1"})
    assert not any(k.startswith(("conv3.", "fc1.")) for k in part)
    for name, value in part.items():
        assert np.array_equal(value, full[name]), name
    assert "conv1.weight" in part


def test_input_gradient_matches_finite_differences():
    net = build_linear_net((5,), 3, seed=1).astype(np.float64)
    x = make_rng(4).standard_normal((2, 5))

    def f(v):
        logits, _ = forward(net, v)
        return network_loss(net, logits, [0, 2])[0]

    logits, tape = forward(net, x)
    _, _, g = network_loss(net, logits, [0, 2])
    grads = backward(tape, g, wrt_input=True)
    assert np.allclose(grads.input_grad, oracles.central_difference(f, x.copy()), atol=1e-8)


@given(st.integers(0, 2**31))
def test_chain_rule_matches_manual_composition(seed):
    rng = make_rng(seed)
    g_layer, f_layer = Dense(4, 3, "relu"), Dense(3, 2, "identity")
    for layer in (g_layer, f_layer):
        layer.init_params(rng)
        layer.astype(np.float64)
    net = NetworkGraph((4,))
    net.add("g", g_layer)
    net.main_head = net.add("f", f_layer, "g")
    x = rng.standard_normal((3, 4))
    upstream = rng.standard_normal((3, 2))
    _, tape = forward(net, x)
    chained = backward(tape, [upstream], wrt_input=True)

    h, cg = g_layer.forward([x])
    _, cf = f_layer.forward([h])
    (gh,), gf = f_layer.backward(cf, upstream)
    (gx,), gg = g_layer.backward(cg, gh)
    assert np.array_equal(chained["f.weight"], gf["weight"])
    assert np.array_equal(chained["g.weight"], gg["weight"])
    assert np.array_equal(chained.input_grad, gx)


def test_eval_determinism():
    net = tiny_googlenet(seed=4)
    x = make_rng(5).standard_normal((2, 3, 8, 8)).astype(np.float32)
    a, ta = forward(net, x, "eval")
    b, tb = forward(net, x, "eval")
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    ga = backward(ta, network_loss(net, a, [0, 1])[2])
    gb = backward(tb, network_loss(net, b, [0, 1])[2])
    assert all(np.array_equal(ga[k], gb[k]) for k in ga)


def test_gradient_check_linear_quadratic():
    net = build_linear_net((4,), 3, seed=2).astype(np.float64)
    x = make_rng(6).standard_normal((5, 4))
    target = make_rng(7).standard_normal((5, 3))

    def quadratic(logits):
        r = logits[0] - target
        return 0.5 * float((r * r).sum()), [r]

    assert check_gradients(net, x, None, loss_fn=quadratic) < 1e-9


def test_gradient_check_with_relu_margin():
    rng = make_rng(8)
    net = NetworkGraph((3,))
    hidden = Dense(3, 4, "relu")
    hidden.params = {"weight": rng.uniform(0.5, 1.0, (4, 3)), "threshold": np.full(4, -1.0)}
    out = Dense(4, 2, "identity")
    out.params = {"weight": rng.standard_normal((2, 4)), "threshold": rng.standard_normal(2)}
    net.add("hidden", hidden)
    net.main_head = net.add("out", out, "hidden")
    x = rng.uniform(0.1, 1.0, (3, 3))  # every hidden pre-activation is at least 1
    report = gradient_check(net, x, [0, 1, 1], skip_kinks=False)
    assert report.max_relative_error < 1e-6 and report.skipped == 0


def test_gradient_check_requires_float64():
    with pytest.raises(TypeError):
        check_gradients(tiny_caffenet(), np.zeros((1, 3, 16, 16), np.float32), [0])


def test_gradient_check_tiny_caffenet():
    net = tiny_caffenet(seed=1, dtype=np.float64)
    x = make_rng(9).standard_normal((2, 3, 16, 16))
    report = gradient_check(net, x, [0, 2])
    assert report.max_relative_error < 1e-4
    assert report.checked > 10 * report.skipped
