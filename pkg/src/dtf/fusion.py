"""Forward / inverted-backward fusion by per-pixel weighted averaging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .core import FORWARD, SceneFlowField, normalized_coordinate_grid
from .metrics import component_errors, outlier_from_errors
from .netsubstrate import (
    ConvLayerSpec,
    ConvNet,
    NetworkParams,
    init_params,
    load_checkpoint,
    pairwise_softmax,
    save_checkpoint,
)

NORMALIZATION_TOL = 1e-6


@dataclass(frozen=True)
class FusionVariant:
    name: str
    spatial: bool
    per_channel: bool

    @property
    def in_channels(self) -> int:
        return 10 if self.spatial else 8

    @property
    def weight_channels(self) -> int:
        return 4 if self.per_channel else 1

    @property
    def out_logits(self) -> int:
        return 2 * self.weight_channels

    @property
    def tag(self) -> str:
        return f"dtf-fusion-{self.name}-v1"


VARIANTS = {
    "basic": FusionVariant("basic", False, False),
    "spatial": FusionVariant("spatial", True, False),
    "4ch": FusionVariant("4ch", False, True),
    "spatial-4ch": FusionVariant("spatial-4ch", True, True),
}


def get_variant(variant) -> FusionVariant:
    if isinstance(variant, FusionVariant):
        return variant
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown fusion variant {variant!r}; choose from {sorted(VARIANTS)}") from None


def fusion_specs(variant) -> Tuple[ConvLayerSpec, ...]:
    """Dilated context-network stack ending in a linear logit layer."""
    v = get_variant(variant)
    widths = (32, 64, 128, 128, 64, 32, v.out_logits)
    dilations = (1, 2, 4, 8, 16, 1, 1)
    specs = []
    c_in = v.in_channels
    for i, (c_out, d) in enumerate(zip(widths, dilations)):
        act = "linear" if i == len(widths) - 1 else "leaky_relu"
        specs.append(ConvLayerSpec(c_in, c_out, 3, d, act))
        c_in = c_out
    return tuple(specs)


class FusionNetwork(ConvNet):
    def __init__(self, variant, params: NetworkParams):
        self.variant = get_variant(variant)
        super().__init__(fusion_specs(self.variant), params)

    @property
    def tag(self) -> str:
        return self.variant.tag

    def prepare_input(self, fw, inv):
        """Stack ``(N, H, W, 4)`` forward and inverted fields (plus coordinates)."""
        fw = np.asarray(fw)
        inv = np.asarray(inv)
        fw = fw[None] if fw.ndim == 3 else fw
        inv = inv[None] if inv.ndim == 3 else inv
        if fw.shape != inv.shape:
            raise ValueError(f"forward {fw.shape} and inverted {inv.shape} fields differ in shape")
        parts = [fw.astype(self.dtype, copy=False), inv.astype(self.dtype, copy=False)]
        if self.variant.spatial:
            n, h, w, _ = fw.shape
            parts.append(np.broadcast_to(normalized_coordinate_grid(h, w, self.dtype), (n, h, w, 2)))
        return np.concatenate(parts, axis=-1)

    def split_logits(self, logits):
        k = self.variant.weight_channels
        return logits[..., :k], logits[..., k:]

    def save(self, path, extra=None, meta=None):
        save_checkpoint(path, self.tag, self.specs, self.params, extra, meta)

    @classmethod
    def load(cls, path, variant=None, dtype=np.float64) -> "FusionNetwork":
        ckpt = load_checkpoint(path, dtype)
        by_tag = {v.tag: v for v in VARIANTS.values()}
        if ckpt.architecture not in by_tag:
            raise ValueError(f"{path}: {ckpt.architecture!r} is not a fusion checkpoint")
        found = by_tag[ckpt.architecture]
        if variant is not None and get_variant(variant) != found:
            raise ValueError(
                f"{path}: checkpoint holds {ckpt.architecture!r} but variant "
                f"{get_variant(variant).name!r} was requested"
            )
        return cls(found, ckpt.params)


def build_fusion(variant="basic", seed=0, dtype=np.float64) -> FusionNetwork:
    v = get_variant(variant)
    return FusionNetwork(v, init_params(fusion_specs(v), seed, dtype))


@dataclass(frozen=True, eq=False)
class FusionWeights:
    """Convex weights ``(H, W, k)`` with ``k`` = 1 (shared) or 4 (per channel).

    ``w_bw`` doubles as a soft forward-occlusion map.
    """

    w_fw: np.ndarray
    w_bw: np.ndarray

    def __post_init__(self):
        if self.w_fw.shape != self.w_bw.shape:
            raise ValueError("weight grids differ in shape")
        if self.w_fw.ndim != 3 or self.w_fw.shape[-1] not in (1, 4):
            raise ValueError(f"weights must have shape (H, W, 1|4), got {self.w_fw.shape}")

    def max_normalization_error(self) -> float:
        return float(np.max(np.abs(self.w_fw + self.w_bw - 1.0)))

    def occlusion_map(self) -> np.ndarray:
        """Backward preference per pixel (channel mean for per-channel weights)."""
        return self.w_bw.mean(axis=-1)


def predict_weights(net: FusionNetwork, fw: SceneFlowField, inv: SceneFlowField) -> FusionWeights:
    if fw.shape != inv.shape:
        raise ValueError(f"forward {fw.shape} and inverted {inv.shape} fields differ in shape")
    if fw.direction != FORWARD or inv.direction != FORWARD:
        raise ValueError("both fusion inputs must be forward-direction fields")
    logits = net.forward(net.prepare_input(fw.data, inv.data))[0]
    a, b = net.split_logits(logits)
    w_fw, w_bw = pairwise_softmax(a.astype(np.float64), b.astype(np.float64))
    return FusionWeights(w_fw, w_bw)


def blend(fw, inv, w_fw, w_bw):
    """Raw-array weighted average; weights broadcast over the channel axis."""
    return w_fw * fw + w_bw * inv


def weighted_average(fw: SceneFlowField, inv: SceneFlowField, w: FusionWeights) -> SceneFlowField:
    if fw.shape != inv.shape or w.w_fw.shape[:2] != fw.shape:
        raise ValueError("fields and weights differ in shape")
    err = w.max_normalization_error()
    if err > NORMALIZATION_TOL:
        raise ValueError(f"fusion weights do not sum to one (max deviation {err:.3g})")
    valid = None
    if fw.valid is not None or inv.valid is not None:
        valid = fw.mask & inv.mask
    return SceneFlowField(blend(fw.data, inv.data, w.w_fw, w.w_bw), FORWARD, valid)


def oracle_fuse(fw: SceneFlowField, inv: SceneFlowField, gt: SceneFlowField, valid):
    """Pick the better whole 4-vector per valid pixel using the ground truth.

    Fewer outlier components wins, then the smaller L1 error; remaining ties
    keep the forward estimate.  Returns the fused field and a mask that is true
    where the inverted backward estimate was chosen.
    """
    if not (fw.shape == inv.shape == gt.shape):
        raise ValueError("fields differ in shape")
    valid = np.asarray(valid, dtype=bool)

    def score(est):
        n_out = np.zeros(gt.shape, dtype=np.int64)
        for comp in ("D1", "D2", "OF"):
            n_out += outlier_from_errors(*component_errors(est.data, gt.data, comp))
        l1 = np.abs(est.data - gt.data).sum(axis=-1)
        return n_out, l1

    n_fw, l1_fw = score(fw)
    n_inv, l1_inv = score(inv)
    pick_inv = valid & ((n_inv < n_fw) | ((n_inv == n_fw) & (l1_inv < l1_fw)))
    fused = np.where(pick_inv[..., None], inv.data, fw.data)
    return SceneFlowField(fused, FORWARD, fw.valid), pick_inv
