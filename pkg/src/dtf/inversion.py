"""Temporal inversion of backward scene flow into a forward estimate."""

from __future__ import annotations

import numpy as np

from .core import BACKWARD, D0, D1, FORWARD, U, V, SceneFlowField, normalized_coordinate_grid
from .netsubstrate import (
    ConvLayerSpec,
    ConvNet,
    NetworkParams,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

INVERTER_TAG = "dtf-inverter-v1"


def inverter_specs():
    """Four 3x3 leaky layers of width 16 and a linear 7x7 head with 4 outputs."""
    return (
        ConvLayerSpec(6, 16, 3),
        ConvLayerSpec(16, 16, 3),
        ConvLayerSpec(16, 16, 3),
        ConvLayerSpec(16, 16, 3),
        ConvLayerSpec(16, 4, 7, activation="linear"),
    )


class InverterNetwork(ConvNet):
    """Maps a backward field plus image coordinates to a forward field."""

    tag = INVERTER_TAG

    def __init__(self, params: NetworkParams):
        super().__init__(inverter_specs(), params)

    def prepare_input(self, backward):
        """Concatenate ``(N, H, W, 4)`` backward data with normalized x/y coordinates."""
        data = np.asarray(backward)
        if data.ndim == 3:
            data = data[None]
        if data.shape[-1] != 4:
            raise ValueError(f"backward field must have 4 channels, got {data.shape[-1]}")
        n, h, w, _ = data.shape
        coords = np.broadcast_to(normalized_coordinate_grid(h, w, self.dtype), (n, h, w, 2))
        return np.concatenate([data.astype(self.dtype, copy=False), coords], axis=-1)

    def save(self, path, extra=None, meta=None):
        save_checkpoint(path, self.tag, self.specs, self.params, extra, meta)

    @classmethod
    def load(cls, path, dtype=np.float64) -> "InverterNetwork":
        ckpt = load_checkpoint(path, dtype)
        if ckpt.architecture != INVERTER_TAG:
            raise ValueError(f"{path}: checkpoint is {ckpt.architecture!r}, expected {INVERTER_TAG!r}")
        return cls(ckpt.params)


def build_inverter(seed=0, dtype=np.float64) -> InverterNetwork:
    return InverterNetwork(init_params(inverter_specs(), seed, dtype))


def _require_backward(field: SceneFlowField):
    if field.direction != BACKWARD:
        raise ValueError(f"expected a backward field, got direction {field.direction!r}")


def invert(net: InverterNetwork, backward: SceneFlowField) -> SceneFlowField:
    _require_backward(backward)
    out = net.forward(net.prepare_input(backward.data))[0]
    return SceneFlowField(out.astype(np.float64), FORWARD, backward.valid)


def constant_linear_invert(backward: SceneFlowField) -> SceneFlowField:
    """Negate optical flow and disparity change; the reference disparity is kept.

    Target disparities may turn non-positive (``d1 > 2 * d0``); they are kept
    as they are and show up in ``SceneFlowField.nonpositive_disparity``.
    """
    _require_backward(backward)
    src = backward.data
    out = np.empty_like(src)
    out[..., U] = -src[..., U]
    out[..., V] = -src[..., V]
    out[..., D0] = src[..., D0]
    out[..., D1] = 2.0 * src[..., D0] - src[..., D1]
    return SceneFlowField(out, FORWARD, backward.valid)
