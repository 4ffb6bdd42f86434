"""Auxiliary dual-frame scene flow estimators.

Real estimators plug in through precomputed fields on
disk (``kind="external"``).  For desk-scale experiments ``noisy_oracle``
perturbs the ground truth: small, spatially smooth Gaussian noise everywhere
(``noise_length`` px correlation; 0 gives white noise) and a heavy,
occlusion-correlated corruption inside the occluded region of the requested
direction, which is how dual-frame methods typically fail.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import D0, D1, DIRECTIONS, FORWARD, U, V, FrameTripletSample, SceneFlowField
from .data_io import load_external_field

KINDS = ("noisy_oracle", "external")
CORRUPTIONS = ("large_noise", "hold_occluder")
MIN_DISPARITY = 0.1


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "noisy_oracle"
    sigma_flow: float = 0.5
    sigma_disp: float = 0.2
    occ_corruption: str = "large_noise"
    occ_sigma: float = 10.0
    noise_length: float = 4.0
    seed: int = 0
    root: Optional[str] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported estimator kind {self.kind!r}")
        if self.occ_corruption not in CORRUPTIONS:
            raise ValueError(f"unknown occlusion corruption {self.occ_corruption!r}")
        if min(self.sigma_flow, self.sigma_disp, self.occ_sigma, self.noise_length) < 0:
            raise ValueError("noise levels must be non-negative")


def _noise_rng(config: EstimatorConfig, sample_id: str, direction: str):
    key = zlib.crc32(sample_id.encode("utf-8"))
    return np.random.default_rng([config.seed, key, DIRECTIONS.index(direction)])


def _smooth_normal(rng, shape, length):
    """Unit-variance Gaussian noise with a Gaussian correlation kernel.

    Periodic filtering keeps the marginal variance identical at every pixel.
    """
    white = rng.normal(0.0, 1.0, shape)
    if length == 0:
        return white
    sig = (length, length, 0)
    delta = np.zeros(shape[:2] + (1,))
    delta[0, 0, 0] = 1.0
    gain = np.sqrt(np.sum(ndimage.gaussian_filter(delta, sig, mode="wrap") ** 2))
    return ndimage.gaussian_filter(white, sig, mode="wrap") / gain


def _nearest_source(noc: np.ndarray):
    """Index arrays of the nearest non-occluded pixel for every pixel."""
    _, (iy, ix) = ndimage.distance_transform_edt(~noc, return_indices=True)
    return iy, ix


def estimate(sample: FrameTripletSample, direction: str, config: EstimatorConfig) -> SceneFlowField:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    if config.kind == "external":
        if config.root is None:
            raise ValueError("external estimator needs a root directory")
        return load_external_field(config.root, direction, sample.sample_id)
    if config.kind != "noisy_oracle":
        raise ValueError(f"unsupported estimator kind {config.kind!r}")

    gt = sample.gt(direction)
    valid, noc = sample.masks(direction)
    occ = valid & ~noc
    rng = _noise_rng(config, sample.sample_id, direction)
    h, w = gt.shape
    data = np.array(gt.data, dtype=np.float64)
    data[..., (U, V)] += _smooth_normal(rng, (h, w, 2), config.noise_length) * config.sigma_flow
    data[..., (D0, D1)] += _smooth_normal(rng, (h, w, 2), config.noise_length) * config.sigma_disp
    heavy = rng.normal(0.0, 1.0, (h, w, 3)) * config.occ_sigma

    if occ.any():
        # the reference disparity is a same-time stereo match and stays clean
        moving = (U, V, D1)
        if config.occ_corruption == "large_noise":
            for k, c in enumerate(moving):
                data[..., c][occ] += heavy[..., k][occ]
        elif noc.any():
            iy, ix = _nearest_source(noc)
            for c in moving:
                data[..., c][occ] = data[..., c][iy[occ], ix[occ]]
        data[..., D1][occ] = np.maximum(data[..., D1][occ], MIN_DISPARITY)
    return SceneFlowField(data, direction, valid)
