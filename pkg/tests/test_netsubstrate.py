import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtf.fusion import build_fusion
from dtf.inversion import build_inverter
from dtf.netsubstrate import (
    ConvLayerSpec,
    ConvNet,
    NetworkParams,
    conv2d_backward,
    conv2d_forward,
    gradient_check,
    init_params,
    leaky_relu,
    load_checkpoint,
    pairwise_softmax,
    pairwise_softmax_backward,
    save_checkpoint,
)


def test_scalar_affine_conv():
    spec = ConvLayerSpec(1, 1, kernel=1, activation="linear")
    out = conv2d_forward(np.full((1, 1, 1), 2.0), spec, np.full((1, 1, 1, 1), 3.0), np.array([1.0]))
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 7.0


def test_identity_kernel():
    spec = ConvLayerSpec(1, 1, kernel=3, activation="linear")
    w = np.zeros((3, 3, 1, 1))
    w[1, 1] = 1.0
    x = np.random.default_rng(0).normal(size=(5, 6, 1))
    np.testing.assert_array_equal(conv2d_forward(x, spec, w, np.zeros(1)), x)


def test_zero_padding_sums():
    spec = ConvLayerSpec(1, 1, kernel=3, activation="linear")
    out = conv2d_forward(np.ones((3, 3, 1)), spec, np.ones((3, 3, 1, 1)), np.zeros(1))[..., 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[2, 2] == 4.0
    assert out[0, 1] == 6.0


def test_dilated_conv_matches_direct_sum():
    rng = np.random.default_rng(1)
    spec = ConvLayerSpec(2, 3, kernel=3, dilation=2, activation="linear")
    x = rng.normal(size=(6, 7, 2))
    w = rng.normal(size=spec.weight_shape)
    b = rng.normal(size=3)
    out = conv2d_forward(x, spec, w, b)
    pad = np.pad(x, ((2, 2), (2, 2), (0, 0)))
    ref = np.zeros((6, 7, 3)) + b
    for i in range(3):
        for j in range(3):
            ref += pad[2 * i:2 * i + 6, 2 * j:2 * j + 7] @ w[i, j]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_shape_errors():
    spec = ConvLayerSpec(2, 1)
    with pytest.raises(ValueError):
        conv2d_forward(np.ones((4, 4, 3)), spec, np.ones(spec.weight_shape), np.zeros(1))
    with pytest.raises(ValueError):
        ConvLayerSpec(1, 1, kernel=2)
    with pytest.raises(ValueError):
        ConvLayerSpec(1, 1, activation="tanh")


def test_conv_is_homogeneous_in_weights():
    rng = np.random.default_rng(2)
    spec = ConvLayerSpec(3, 2, activation="linear")
    x = rng.normal(size=(5, 5, 3))
    w = rng.normal(size=spec.weight_shape)
    np.testing.assert_allclose(
        conv2d_forward(x, spec, 2.5 * w, np.zeros(2)), 2.5 * conv2d_forward(x, spec, w, np.zeros(2)), atol=1e-12
    )


@pytest.mark.parametrize("x, y", [(1.0, 1.0), (-1.0, -0.1), (0.0, 0.0)])
def test_leaky_relu(x, y):
    assert leaky_relu(x) == pytest.approx(y)


@pytest.mark.parametrize(
    "a, b, wa, wb",
    [(0.0, 0.0, 0.5, 0.5), (np.log(3.0), 0.0, 0.75, 0.25), (1000.0, 0.0, 1.0, 0.0)],
)
def test_pairwise_softmax_examples(a, b, wa, wb):
    with np.errstate(over="raise", invalid="raise"):
        got = pairwise_softmax(np.array([a]), np.array([b]))
    assert got[0][0] == pytest.approx(wa, abs=1e-12)
    assert got[1][0] == pytest.approx(wb, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-500, 500), st.floats(-500, 500), st.floats(-100, 100))
def test_pairwise_softmax_properties(a, b, c):
    wa, wb = pairwise_softmax(np.array([a]), np.array([b]))
    assert abs(wa[0] + wb[0] - 1.0) < 1e-9
    assert 0.0 <= wa[0] <= 1.0 and 0.0 <= wb[0] <= 1.0
    sa, sb = pairwise_softmax(np.array([a + c]), np.array([b + c]))
    assert sa[0] == pytest.approx(wa[0], abs=1e-9)


def test_pairwise_softmax_backward_matches_finite_difference():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=5), rng.normal(size=5)
    ga, gb = rng.normal(size=5), rng.normal(size=5)

    def f(a, b):
        wa, wb = pairwise_softmax(a, b)
        return np.sum(wa * ga + wb * gb)

    wa, wb = pairwise_softmax(a, b)
    da, db = pairwise_softmax_backward(wa, wb, ga, gb)
    h = 1e-6
    for i in range(5):
        e = np.zeros(5)
        e[i] = h
        assert da[i] == pytest.approx((f(a + e, b) - f(a - e, b)) / (2 * h), rel=1e-6, abs=1e-9)
        assert db[i] == pytest.approx((f(a, b + e) - f(a, b - e)) / (2 * h), rel=1e-6, abs=1e-9)


def _projection_loss(net, seed):
    def fn(params, x):
        tapes = []
        out = net.forward(x, params, tapes)
        r = np.random.default_rng(seed).normal(size=out.shape)
        grads, gx = net.backward(r, tapes, params)
        return float(np.sum(out * r)), grads, gx

    return fn


def test_gradient_check_single_linear_layer():
    spec = ConvLayerSpec(1, 1, kernel=1, activation="linear")
    net = ConvNet([spec], init_params([spec], seed=0))

    def fn(params, x):
        tapes = []
        out = net.forward(x, params, tapes)
        grads, gx = net.backward(2 * out, tapes, params)
        return float(np.sum(out ** 2)), grads, gx

    x = np.random.default_rng(0).normal(size=(4, 4, 1))
    assert gradient_check(fn, net.params, x) < 1e-6


def test_gradient_check_rejects_non_finite():
    spec = ConvLayerSpec(1, 1, kernel=1, activation="linear")
    net = ConvNet([spec], init_params([spec]))

    def fn(params, x):
        bad = params.zeros_like()
        bad.weights[0][...] = np.nan
        return 0.0, bad, np.zeros_like(x)

    with pytest.raises(FloatingPointError):
        gradient_check(fn, net.params, np.ones((2, 2, 1)))


def test_small_stack_gradients_with_dilation():
    specs = [ConvLayerSpec(3, 4, 3, 2), ConvLayerSpec(4, 2, 3, 1, "linear")]
    net = ConvNet(specs, init_params(specs, seed=4))
    x = np.random.default_rng(4).normal(size=(2, 7, 6, 3))
    assert gradient_check(_projection_loss(net, 5), net.params, x) < 1e-6


def _random_biases(net, seed):
    rng = np.random.default_rng(seed)
    for b in net.params.biases:
        b[...] = rng.normal(0.0, 0.5, b.shape)
    return net


def test_inverter_gradient_check():
    net = _random_biases(build_inverter(seed=0), 0)
    x = np.random.default_rng(0).normal(size=(8, 8, 6))
    assert gradient_check(_projection_loss(net, 1), net.params, x, probes=6) < 1e-3


def test_fusion_basic_gradient_check():
    net = _random_biases(build_fusion("basic", seed=0), 0)
    x = np.random.default_rng(0).normal(size=(8, 8, 8))
    assert gradient_check(_projection_loss(net, 1), net.params, x, probes=4) < 1e-3


def test_conv_backward_batch_consistency():
    rng = np.random.default_rng(6)
    spec = ConvLayerSpec(2, 3, activation="linear")
    w = rng.normal(size=spec.weight_shape)
    x = rng.normal(size=(2, 5, 5, 2))
    g = rng.normal(size=(2, 5, 5, 3))
    tape = {}
    conv2d_forward(x, spec, w, np.zeros(3), tape)
    gx, gw, gb = conv2d_backward(g, spec, w, tape)
    acc_w = np.zeros_like(gw)
    for n in range(2):
        t = {}
        conv2d_forward(x[n], spec, w, np.zeros(3), t)
        gxn, gwn, _ = conv2d_backward(g[n], spec, w, t)
        np.testing.assert_allclose(gxn, gx[n], atol=1e-12)
        acc_w += gwn
    np.testing.assert_allclose(acc_w, gw, atol=1e-10)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 1, 2)), atol=1e-10)


def test_parameter_counts():
    assert build_inverter().n_params() == 10_980
    assert build_fusion("basic").n_params() == 335_106


def test_params_shape_check():
    specs = [ConvLayerSpec(2, 3)]
    p = init_params(specs)
    with pytest.raises(ValueError):
        NetworkParams(p.weights, []).check(specs)
    with pytest.raises(ValueError):
        ConvNet([ConvLayerSpec(2, 3), ConvLayerSpec(4, 1)], init_params([ConvLayerSpec(2, 3), ConvLayerSpec(4, 1)]))


def test_init_is_seeded():
    specs = [ConvLayerSpec(2, 3), ConvLayerSpec(3, 1)]
    a, b = init_params(specs, seed=7), init_params(specs, seed=7)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert not np.array_equal(a.weights[0], init_params(specs, seed=8).weights[0])


def test_checkpoint_round_trip_and_determinism(tmp_path):
    specs = [ConvLayerSpec(2, 3), ConvLayerSpec(3, 1, 1, 1, "linear")]
    p = init_params(specs, seed=1)
    extra = {"adam.step": np.array(3.0)}
    save_checkpoint(tmp_path / "a.ckpt", "toy", specs, p, extra, {"epoch": 2})
    save_checkpoint(tmp_path / "b.ckpt", "toy", specs, p.copy(), dict(extra), {"epoch": 2})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ck = load_checkpoint(tmp_path / "a.ckpt")
    assert ck.architecture == "toy" and ck.specs == tuple(specs) and ck.meta == {"epoch": 2}
    assert float(ck.extra["adam.step"]) == 3.0
    for x, y in zip(p.arrays(), ck.params.arrays()):
        np.testing.assert_array_equal(x, y)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError):
        load_checkpoint(path)
    specs = [ConvLayerSpec(1, 1)]
    save_checkpoint(path, "toy", specs, init_params(specs))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(path)
