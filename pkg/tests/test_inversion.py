import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtf import synth
from dtf.core import BACKWARD, FORWARD, SceneFlowField
from dtf.inversion import INVERTER_TAG, InverterNetwork, build_inverter, constant_linear_invert, invert
from dtf.fusion import build_fusion


def backward(*pixels):
    return SceneFlowField(np.array(pixels, float).reshape(1, -1, 4), BACKWARD)


def test_architecture():
    net = build_inverter(seed=3)
    assert net.n_params() == 10_980
    assert [s.kernel for s in net.specs] == [3, 3, 3, 3, 7]
    assert [s.out_channels for s in net.specs] == [16, 16, 16, 16, 4]
    assert net.specs[0].in_channels == 6
    assert [s.activation for s in net.specs] == ["leaky_relu"] * 4 + ["linear"]


def test_seeded_build():
    a, b = build_inverter(seed=5), build_inverter(seed=5)
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        np.testing.assert_array_equal(x, y)


def test_zero_head_gives_zero_field():
    net = build_inverter()
    net.params.weights[-1][...] = 0
    out = invert(net, SceneFlowField(np.random.default_rng(0).normal(size=(5, 7, 4)), BACKWARD))
    assert out.direction == FORWARD
    assert out.shape == (5, 7)
    np.testing.assert_array_equal(out.data, 0.0)


def test_linear_head_passes_negative_values():
    net = build_inverter()
    net.params.weights[-1][...] = 0
    net.params.biases[-1][...] = -2.0
    out = invert(net, SceneFlowField(np.zeros((3, 3, 4)), BACKWARD))
    np.testing.assert_array_equal(out.data, -2.0)


def test_invert_requires_backward():
    with pytest.raises(ValueError):
        invert(build_inverter(), SceneFlowField(np.zeros((2, 2, 4))))
    with pytest.raises(ValueError):
        constant_linear_invert(SceneFlowField(np.zeros((2, 2, 4))))


def test_interior_translation_equivariance_without_coordinates():
    net = build_inverter(seed=1)
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(size=(1, 24, 24, 4)), np.zeros((1, 24, 24, 2))], axis=-1)
    shifted = np.roll(x, (3, 2), axis=(1, 2))
    a = net.forward(x)[0]
    b = net.forward(shifted)[0]
    # receptive field radius is 7 px; compare well inside the border
    np.testing.assert_allclose(b[12:17, 12:17], a[9:14, 10:15], atol=1e-12)


def test_save_load_and_tag_check(tmp_path):
    net = build_inverter(seed=2)
    net.save(tmp_path / "inv.ckpt")
    back = InverterNetwork.load(tmp_path / "inv.ckpt")
    for x, y in zip(net.params.arrays(), back.params.arrays()):
        np.testing.assert_array_equal(x, y)
    assert back.tag == INVERTER_TAG
    build_fusion("basic").save(tmp_path / "fus.ckpt")
    with pytest.raises(ValueError):
        InverterNetwork.load(tmp_path / "fus.ckpt")


def test_constant_linear_examples():
    out = constant_linear_invert(backward((-3, 1, 20, 22)))
    np.testing.assert_array_equal(out.data[0, 0], [3, -1, 20, 18])
    out = constant_linear_invert(backward((0, 0, 7, 7)))
    np.testing.assert_array_equal(out.data[0, 0], [0, 0, 7, 7])


def test_constant_linear_keeps_nonpositive_disparity():
    out = constant_linear_invert(backward((0, 0, 2, 5)))
    assert out.d1[0, 0] == -1.0
    assert out.nonpositive_disparity()[0, 0]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100, allow_nan=False), min_size=4, max_size=4))
def test_constant_linear_involution(px):
    once = constant_linear_invert(backward(px))
    twice = constant_linear_invert(once.replace(direction=BACKWARD))
    np.testing.assert_allclose(twice.data, backward(px).data, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_constant_linear_exact_on_constant_velocity(seed):
    scene = synth.resolve(synth.random_scene(seed, "constant"))
    fw = synth.analytic_field(scene, FORWARD)
    bw = synth.analytic_field(scene, BACKWARD)
    _, noc = synth.occlusion_masks(scene, FORWARD)
    err = np.abs(constant_linear_invert(bw).data - fw.data)[noc]
    assert err.max() < 1e-6
