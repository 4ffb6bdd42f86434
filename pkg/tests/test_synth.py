import numpy as np
import pytest

from dtf import synth
from dtf.core import BACKWARD, FORWARD
from dtf.inversion import constant_linear_invert
from dtf.synth import ObjectSpec, SceneConfig


def single_mover(vx=0.5, ax=0.0):
    # 2 m x 2 m plate at Z = 10 in front of a plane at Z = 20; 48 px focal length
    obj = ObjectSpec((2.0, 2.0), (0.0, 0.0, 10.0), (vx, 0.0, 0.0), (ax, 0.0, 0.0), texture_seed=3)
    return SceneConfig(height=32, width=64, focal=48.0, background_depth=20.0, objects=(obj,))


def test_static_scene_has_no_motion():
    sample = synth.generate_sample(synth.random_scene(3, "static"))
    for direction in (FORWARD, BACKWARD):
        gt = sample.gt(direction)
        np.testing.assert_allclose(gt.u, 0, atol=1e-12)
        np.testing.assert_allclose(gt.v, 0, atol=1e-12)
        np.testing.assert_allclose(gt.d1, gt.d0, atol=1e-12)
        valid, noc = sample.masks(direction)
        assert valid.all() and noc.all()


def test_generation_is_deterministic():
    a = synth.generate_sample(synth.random_scene(11, "driving"))
    b = synth.generate_sample(synth.random_scene(11, "driving"))
    np.testing.assert_array_equal(a.gt_forward.data, b.gt_forward.data)
    np.testing.assert_array_equal(a.noc_bw, b.noc_bw)
    for key in a.images:
        np.testing.assert_array_equal(a.images[key], b.images[key])
    assert set(a.images) == {(s, t) for s in ("left", "right") for t in (-1, 0, 1)}
    assert a.images[("left", 0)].shape == (32, 64, 3)


def test_moving_plate_occlusion_bands():
    scene = synth.resolve(single_mover())
    # the plate spans x in [26.7, 36.3] and y in [10.7, 20.3]; it moves 2.4 px per frame
    _, noc_fw = synth.occlusion_masks(scene, FORWARD)
    _, noc_bw = synth.occlusion_masks(scene, BACKWARD)
    occ_fw = np.argwhere(~noc_fw)
    occ_bw = np.argwhere(~noc_bw)
    assert set(occ_fw[:, 1]) == {37, 38}
    assert set(occ_bw[:, 1]) == {25, 26}
    assert set(occ_fw[:, 0]) == set(range(11, 21)) == set(occ_bw[:, 0])


def test_plate_flow_and_disparity():
    scene = synth.resolve(single_mover())
    gt = synth.analytic_field(scene, FORWARD)
    assert gt.u[15, 30] == pytest.approx(2.4)
    assert gt.d0[15, 30] == pytest.approx(4.8)
    assert gt.u[15, 5] == pytest.approx(0.0)
    assert gt.d0[15, 5] == pytest.approx(2.4)


def test_camera_translation_matches_pinhole_algebra():
    base = SceneConfig(height=16, width=24, focal=18.0, background_depth=12.0)
    scene = synth.resolve(synth.with_camera_translation(base, (-0.5, 0.0, 0.0)))
    gt = synth.analytic_field(scene, FORWARD)
    np.testing.assert_allclose(gt.u, 18.0 * 0.5 / 12.0, atol=1e-12)
    np.testing.assert_allclose(gt.v, 0.0, atol=1e-12)


def test_stereo_motion_equivalence():
    cfg = synth.random_scene(5, "static")
    moved = synth.with_camera_translation(cfg, (-cfg.baseline, 0.0, 0.0))
    gt = synth.analytic_field(synth.resolve(moved), FORWARD)
    np.testing.assert_allclose(gt.u, gt.d0, atol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_constant_motion_is_time_symmetric(seed):
    scene = synth.resolve(synth.random_scene(seed, "constant"))
    fw = synth.analytic_field(scene, FORWARD).data
    bw = synth.analytic_field(scene, BACKWARD).data
    np.testing.assert_allclose(bw[..., :2], -fw[..., :2], atol=1e-9)
    np.testing.assert_allclose(bw[..., 3] - bw[..., 2], -(fw[..., 3] - fw[..., 2]), atol=1e-9)


def test_acceleration_breaks_symmetry_monotonically():
    gaps = []
    for a in (0.0, 0.2, 0.4):
        scene = synth.resolve(single_mover(vx=0.3, ax=a))
        fw = synth.analytic_field(scene, FORWARD)
        inv = constant_linear_invert(synth.analytic_field(scene, BACKWARD))
        gaps.append(np.abs(inv.data - fw.data).max())
    assert gaps[0] < 1e-9
    assert 0 < gaps[1] < gaps[2]


def test_forward_camera_motion_occludes_borders():
    cfg = SceneConfig(height=24, width=32, focal=24.0, background_depth=10.0, camera_velocity=(0.0, 0.0, 1.0))
    _, noc = synth.occlusion_masks(synth.resolve(cfg), FORWARD)
    for corner in (noc[0, 0], noc[0, -1], noc[-1, 0], noc[-1, -1]):
        assert not corner
    assert noc[12, 16]
    _, noc_bw = synth.occlusion_masks(synth.resolve(cfg), BACKWARD)
    assert noc_bw.all()


def test_masks_differ_between_directions_for_moving_objects():
    for seed in range(5):
        s = synth.generate_sample(synth.random_scene(seed, "driving"))
        assert not np.array_equal(s.noc_fw, s.noc_bw)


def test_object_behind_camera_is_rejected():
    obj = ObjectSpec((1.0, 1.0), (0.0, 0.0, 1.0), (0.0, 0.0, -2.0))
    with pytest.raises(ValueError):
        synth.resolve(SceneConfig(objects=(obj,)))
    with pytest.raises(ValueError):
        SceneConfig(focal=0.0)


def test_scene_config_text_round_trip():
    cfg = synth.random_scene(7, "accelerated")
    assert SceneConfig.from_text(cfg.to_text()) == cfg


@pytest.mark.parametrize("preset", synth.PRESETS)
def test_presets_are_valid(preset):
    ds = synth.generate_dataset(2, seed=20, preset=preset, height=16, width=24)
    assert [s.sample_id for s in ds] == ["000020", "000021"]
    assert ds[0].gt_forward.shape == (16, 24)
    assert np.all(ds[0].gt_forward.d0 > 0)


def test_accelerated_preset_breaks_constant_inversion():
    rates = []
    for seed in range(3):
        s = synth.generate_sample(synth.random_scene(seed, "accelerated"))
        inv = constant_linear_invert(s.gt_backward)
        err = np.hypot(*(inv.data[..., :2] - s.gt_forward.data[..., :2]).transpose(2, 0, 1))
        rates.append(err.max())
    assert min(rates) > 0.1
