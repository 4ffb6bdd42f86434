"""Shared field types, masks and coordinate helpers.

Grids are plain ``numpy`` arrays laid out as ``(height, width, channels)``;
masks are boolean ``(height, width)`` arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

FORWARD = "forward"
BACKWARD = "backward"
DIRECTIONS = (FORWARD, BACKWARD)

# channel order of a scene flow field
U, V, D0, D1 = 0, 1, 2, 3
CHANNEL_NAMES = ("u", "v", "d0", "d1")


def _frozen(array, dtype=None):
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class SceneFlowField:
    """Image-space scene flow on the reference grid.

    ``data`` has shape ``(H, W, 4)`` holding optical flow ``(u, v)``, the
    disparity at the reference time and the disparity at the target time
    registered to the reference pixel.  ``valid`` is an optional boolean mask;
    ``None`` means every pixel is valid.
    """

    data: np.ndarray
    direction: str = FORWARD
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 4:
            raise ValueError(f"scene flow must have shape (H, W, 4), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("scene flow grid must be at least 1x1")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {self.direction!r}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        object.__setattr__(self, "data", _frozen(data))
        if self.valid is not None:
            valid = np.asarray(self.valid, dtype=bool)
            if valid.shape != data.shape[:2]:
                raise ValueError(f"valid mask {valid.shape} does not match field {data.shape[:2]}")
            object.__setattr__(self, "valid", _frozen(valid))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape[:2]

    @property
    def u(self):
        return self.data[..., U]

    @property
    def v(self):
        return self.data[..., V]

    @property
    def d0(self):
        return self.data[..., D0]

    @property
    def d1(self):
        return self.data[..., D1]

    @property
    def mask(self) -> np.ndarray:
        """Validity mask, materialized as all-true when absent."""
        if self.valid is None:
            return np.ones(self.shape, dtype=bool)
        return self.valid

    def nonpositive_disparity(self) -> np.ndarray:
        """Valid pixels whose disparities break the positivity invariant."""
        return self.mask & ((self.d0 <= 0) | (self.d1 <= 0))

    def replace(self, data=None, direction=None, valid=...) -> "SceneFlowField":
        return SceneFlowField(
            self.data if data is None else data,
            self.direction if direction is None else direction,
            self.valid if valid is ... else valid,
        )


@dataclass(frozen=True, eq=False)
class FrameTripletSample:
    """Three stereo pairs around the reference time plus ground truth.

    ``images`` maps ``(side, t)`` with side in ``{"left", "right"}`` and
    ``t`` in ``{-1, 0, 1}`` to ``(H, W, 3)`` arrays with values in [0, 1].
    ``gt_backward`` and its masks are ``None`` when backward ground truth is
    not available.
    """

    images: Dict[Tuple[str, int], np.ndarray]
    gt_forward: SceneFlowField
    valid_fw: np.ndarray
    noc_fw: np.ndarray
    gt_backward: Optional[SceneFlowField] = None
    valid_bw: Optional[np.ndarray] = None
    noc_bw: Optional[np.ndarray] = None
    sample_id: str = ""
    meta: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        shape = self.gt_forward.shape
        for key, img in self.images.items():
            if img.shape[:2] != shape:
                raise ValueError(f"image {key} has shape {img.shape[:2]}, expected {shape}")
        for name in ("valid_fw", "noc_fw", "valid_bw", "noc_bw"):
            mask = getattr(self, name)
            if mask is None:
                continue
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != shape:
                raise ValueError(f"{name} has shape {mask.shape}, expected {shape}")
            object.__setattr__(self, name, _frozen(mask))
        if self.gt_backward is not None and self.gt_backward.shape != shape:
            raise ValueError("forward and backward ground truth differ in shape")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.gt_forward.shape

    @property
    def has_backward(self) -> bool:
        return self.gt_backward is not None

    def gt(self, direction: str) -> SceneFlowField:
        if direction == FORWARD:
            return self.gt_forward
        if self.gt_backward is None:
            raise ValueError(f"sample {self.sample_id!r}: backward ground truth is absent")
        return self.gt_backward

    def masks(self, direction: str) -> Tuple[np.ndarray, np.ndarray]:
        """``(valid, noc)`` for the requested direction."""
        if direction == FORWARD:
            return self.valid_fw, self.noc_fw
        if self.valid_bw is None:
            raise ValueError(f"sample {self.sample_id!r}: backward masks are absent")
        return self.valid_bw, self.noc_bw


def normalized_coordinate_grid(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """Pixel coordinates mapped to [-1, 1]; channel 0 is x, channel 1 is y.

    A dimension of size one maps to 0.
    """
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be positive")
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    grid = np.empty((height, width, 2), dtype=dtype)
    grid[..., 0] = xs[None, :]
    grid[..., 1] = ys[:, None]
    return grid


def derive_occ_mask(valid: np.ndarray, noc: np.ndarray) -> np.ndarray:
    """Occluded-only region: valid pixels that are not non-occluded."""
    valid = np.asarray(valid, dtype=bool)
    noc = np.asarray(noc, dtype=bool)
    if valid.shape != noc.shape:
        raise ValueError(f"mask shapes differ: {valid.shape} vs {noc.shape}")
    return valid & ~noc
