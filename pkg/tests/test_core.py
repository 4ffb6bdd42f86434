import numpy as np
import pytest
from hypothesis import given, strategies as st

from dtf.core import (
    BACKWARD,
    FORWARD,
    SceneFlowField,
    derive_occ_mask,
    normalized_coordinate_grid,
)


def test_coordinate_grid_row():
    g = normalized_coordinate_grid(1, 3)
    np.testing.assert_array_equal(g[0, :, 0], [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(g[..., 1], 0.0)


def test_coordinate_grid_column():
    g = normalized_coordinate_grid(3, 1)
    np.testing.assert_array_equal(g[:, 0, 1], [-1.0, 0.0, 1.0])


def test_coordinate_grid_single_pixel():
    np.testing.assert_array_equal(normalized_coordinate_grid(1, 1), np.zeros((1, 1, 2)))


def test_coordinate_grid_rejects_empty():
    with pytest.raises(ValueError):
        normalized_coordinate_grid(0, 4)


@given(st.integers(1, 40), st.integers(1, 40))
def test_coordinate_grid_flip_antisymmetry(h, w):
    g = normalized_coordinate_grid(h, w)
    np.testing.assert_allclose(g[:, ::-1, 0], -g[..., 0], atol=1e-15)
    np.testing.assert_allclose(g[::-1, :, 1], -g[..., 1], atol=1e-15)


def test_occ_mask_examples():
    ones = np.ones((2, 2), bool)
    zeros = np.zeros((2, 2), bool)
    assert not derive_occ_mask(ones, ones).any()
    assert derive_occ_mask(ones, zeros).all()
    valid = ones.copy()
    valid[0, 0] = False
    assert not derive_occ_mask(valid, zeros)[0, 0]


def test_occ_mask_shape_mismatch():
    with pytest.raises(ValueError):
        derive_occ_mask(np.ones((2, 2)), np.ones((2, 3)))


@given(st.integers(0, 2**16 - 1), st.integers(0, 2**16 - 1))
def test_occ_mask_partition(a, b):
    valid = np.array([(a >> i) & 1 for i in range(16)], bool).reshape(4, 4)
    noc = np.array([(b >> i) & 1 for i in range(16)], bool).reshape(4, 4)
    occ = derive_occ_mask(valid, noc)
    np.testing.assert_array_equal(occ | (valid & noc), valid)
    assert not (occ & noc).any()


def test_field_is_immutable_and_validated():
    data = np.ones((2, 3, 4))
    f = SceneFlowField(data, BACKWARD)
    data[0, 0, 0] = 5
    assert f.u[0, 0] == 1
    with pytest.raises(ValueError):
        f.data[0, 0, 0] = 2
    with pytest.raises(ValueError):
        SceneFlowField(np.ones((2, 3, 3)))
    with pytest.raises(ValueError):
        SceneFlowField(np.ones((2, 3, 4)), "sideways")
    with pytest.raises(ValueError):
        SceneFlowField(np.ones((2, 3, 4)), FORWARD, np.ones((3, 2), bool))


def test_nonpositive_disparity_flag():
    data = np.ones((1, 2, 4))
    data[0, 1, 3] = -0.5
    f = SceneFlowField(data)
    np.testing.assert_array_equal(f.nonpositive_disparity(), [[False, True]])
    g = f.replace(valid=np.array([[True, False]]))
    assert not g.nonpositive_disparity().any()
