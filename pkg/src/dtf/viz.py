"""Image renderings of errors, flow fields and soft occlusion maps (RGB uint8)."""

from __future__ import annotations

import cv2
import numpy as np

from .core import SceneFlowField
from .metrics import outlier_maps

INLIER_RGB = (0, 200, 0)
OUTLIER_RGB = (255, 0, 255)


def error_map(est: SceneFlowField, gt: SceneFlowField, valid, component: str = "SF") -> np.ndarray:
    """Green inliers, magenta outliers, black where there is no ground truth."""
    valid = np.asarray(valid, dtype=bool)
    out = outlier_maps(est, gt, valid)[component]
    img = np.zeros(gt.shape + (3,), dtype=np.uint8)
    img[valid & ~out] = INLIER_RGB
    img[valid & out] = OUTLIER_RGB
    return img


def flow_to_rgb(flow, valid=None, max_magnitude=None):
    """Color-wheel rendering: hue follows direction, saturation magnitude.

    Returns ``(image, max_magnitude)``; the normalizer defaults to the largest
    valid magnitude so that renderings of one field can be compared.
    """
    flow = np.asarray(flow, dtype=np.float64)
    valid = np.ones(flow.shape[:2], bool) if valid is None else np.asarray(valid, dtype=bool)
    mag, ang = cv2.cartToPolar(flow[..., 0], flow[..., 1], angleInDegrees=True)
    if max_magnitude is None:
        max_magnitude = float(mag[valid].max()) if valid.any() else 0.0
    scale = max_magnitude if max_magnitude > 0 else 1.0
    hsv = np.zeros(flow.shape[:2] + (3,), dtype=np.uint8)
    hsv[..., 0] = np.round(ang / 2.0).astype(np.uint8) % 180
    hsv[..., 1] = np.round(np.clip(mag / scale, 0.0, 1.0) * 255).astype(np.uint8)
    hsv[..., 2] = 255
    rgb = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    rgb[~valid] = 0
    return rgb, max_magnitude


def occlusion_image(w_bw) -> np.ndarray:
    """8-bit grayscale of the backward weight: bright means forward-occluded."""
    w = np.asarray(w_bw, dtype=np.float64)
    if w.ndim == 3:
        w = w.mean(axis=-1)
    return np.round(np.clip(w, 0.0, 1.0) * 255).astype(np.uint8)
