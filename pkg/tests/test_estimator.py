import numpy as np
import pytest

from dtf import synth
from dtf.core import BACKWARD, FORWARD
from dtf.data_io import write_field
from dtf.estimator import EstimatorConfig, estimate
from dtf.metrics import evaluate


@pytest.fixture(scope="module")
def sample():
    return synth.generate_sample(synth.random_scene(4, "driving"), sample_id="000004")


def test_zero_noise_is_exact_on_noc(sample):
    cfg = EstimatorConfig(sigma_flow=0, sigma_disp=0, occ_sigma=0)
    for d in (FORWARD, BACKWARD):
        est = estimate(sample, d, cfg)
        _, noc = sample.masks(d)
        np.testing.assert_array_equal(est.data[noc], sample.gt(d).data[noc])
        assert est.direction == d


def test_deterministic_and_seed_dependent(sample):
    a = estimate(sample, FORWARD, EstimatorConfig(seed=3))
    b = estimate(sample, FORWARD, EstimatorConfig(seed=3))
    c = estimate(sample, FORWARD, EstimatorConfig(seed=4))
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_occlusion_corruption_dominates(sample):
    est = estimate(sample, FORWARD, EstimatorConfig(sigma_flow=0.5, occ_sigma=10))
    valid, noc = sample.masks(FORWARD)
    rep = evaluate(est, sample.gt_forward, valid, noc)
    assert rep.rate("OF", "occ") > 50
    assert rep.rate("OF", "noc") < 1


def test_corruption_confined_to_occluded_region(sample):
    clean = EstimatorConfig(occ_sigma=0.0, occ_corruption="large_noise")
    heavy = EstimatorConfig(occ_sigma=25.0, occ_corruption="large_noise")
    _, noc = sample.masks(FORWARD)
    a = estimate(sample, FORWARD, clean).data
    b = estimate(sample, FORWARD, heavy).data
    np.testing.assert_array_equal(a[noc], b[noc])
    assert not np.array_equal(a[~noc], b[~noc])
    # the reference disparity is never corrupted
    np.testing.assert_array_equal(a[..., 2], b[..., 2])


def test_hold_occluder_copies_nearest_visible_value(sample):
    cfg = EstimatorConfig(sigma_flow=0, sigma_disp=0, occ_corruption="hold_occluder")
    est = estimate(sample, FORWARD, cfg)
    _, noc = sample.masks(FORWARD)
    occ = ~noc
    values = {tuple(v) for v in sample.gt_forward.data[noc][:, :2]}
    assert all(tuple(v) in values for v in est.data[occ][:, :2])


def test_noise_is_zero_mean(sample):
    _, noc = sample.masks(FORWARD)
    gt = sample.gt_forward.data
    errs = []
    for n in (4, 64):
        mean = np.mean([estimate(sample, FORWARD, EstimatorConfig(seed=s)).data for s in range(n)], axis=0)
        errs.append(np.sqrt(np.mean((mean - gt)[noc][:, :2] ** 2)))
    # standard error shrinks by sqrt(16) = 4
    assert errs[1] < errs[0] / 2.5
    assert errs[1] < 0.5 / np.sqrt(64) * 1.5


def test_noise_level_matches_sigma(sample):
    _, noc = sample.masks(FORWARD)
    d = np.concatenate([
        (estimate(sample, FORWARD, EstimatorConfig(seed=s)).data - sample.gt_forward.data)[noc]
        for s in range(30)
    ])
    assert np.std(d[:, :2]) == pytest.approx(0.5, rel=0.1)
    assert np.std(d[:, 3]) == pytest.approx(0.2, rel=0.1)


def test_white_noise_option(sample):
    est = estimate(sample, FORWARD, EstimatorConfig(noise_length=0.0, occ_sigma=0))
    diff = est.u - sample.gt_forward.u
    # neighbouring errors are uncorrelated
    assert abs(np.corrcoef(diff[:, :-1].ravel(), diff[:, 1:].ravel())[0, 1]) < 0.15


def test_config_validation():
    with pytest.raises(ValueError):
        EstimatorConfig(kind="magic")
    with pytest.raises(ValueError):
        EstimatorConfig(sigma_flow=-1)
    with pytest.raises(ValueError):
        EstimatorConfig(occ_corruption="blur")


def test_external_estimator(tmp_path, sample):
    noisy = estimate(sample, BACKWARD, EstimatorConfig())
    write_field(tmp_path, sample.sample_id, noisy)
    loaded = estimate(sample, BACKWARD, EstimatorConfig(kind="external", root=str(tmp_path)))
    assert np.abs(loaded.data - noisy.data).max() <= 1 / 128
    with pytest.raises(FileNotFoundError):
        estimate(sample, FORWARD, EstimatorConfig(kind="external", root=str(tmp_path)))
    with pytest.raises(ValueError):
        estimate(sample, FORWARD, EstimatorConfig(kind="external"))
