"""KITTI-compatible PNG codecs and the on-disk dataset layout.

Per dataset root::

    image_2/<id>_09.png  _10.png  _11.png    left frames t-1, t, t+1
    image_3/<id>_09.png  _10.png  _11.png    right frames
    flow_fw/<id>.png   flow_bw/<id>.png      16-bit flow (u, v, valid)
    disp0/<id>.png                           16-bit disparity at t
    disp1_fw/<id>.png  disp1_bw/<id>.png     16-bit disparity at t+-1 on the t grid
    mask_noc_fw/<id>.png  mask_noc_bw/<id>.png   8-bit non-occluded masks
    scene/<id>.txt                           generating scene config (optional)
    manifest.txt                             split tag + sample ids
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import cv2
import numpy as np

from .core import BACKWARD, DIRECTIONS, FORWARD, FrameTripletSample, SceneFlowField

FLOW_SCALE = 64.0
FLOW_OFFSET = 2.0 ** 15
DISP_SCALE = 256.0
FRAME_SUFFIX = {-1: "09", 0: "10", 1: "11"}
SPLITS = ("train", "val", "test")


def _imread16(path, channels: int) -> np.ndarray:
    path = str(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError(f"{path}: unreadable image")
    if img.dtype != np.uint16:
        raise ValueError(f"{path}: expected a 16-bit image, got {img.dtype}")
    got = 1 if img.ndim == 2 else img.shape[2]
    if got != channels:
        raise ValueError(f"{path}: expected {channels} channel(s), got {got}")
    return img


def _imwrite(path, img):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def write_disparity_png(path, disp, valid=None, clip: bool = False):
    """Store ``round(d * 256)`` as uint16; 0 marks invalid pixels.

    Valid disparities that would round to 0 or overflow raise ``ValueError``;
    with ``clip`` they are clamped into the representable range instead.
    """
    disp = np.asarray(disp, dtype=np.float64)
    valid = np.isfinite(disp) if valid is None else (np.asarray(valid, dtype=bool) & np.isfinite(disp))
    stored = np.zeros(disp.shape, dtype=np.float64)
    stored[valid] = np.round(disp[valid] * DISP_SCALE)
    if clip:
        stored[valid] = np.clip(stored[valid], 1, 65535)
    else:
        if np.any(stored[valid] < 1):
            raise ValueError(f"{path}: disparity below 1/512 px collides with the invalid code")
        if np.any(stored[valid] > 65535):
            raise ValueError(f"{path}: disparity overflows the 16-bit range")
    _imwrite(path, stored.astype(np.uint16))


def read_disparity_png(path):
    """``(disparity, valid)``; invalid pixels read as 0."""
    raw = _imread16(path, 1)
    return raw.astype(np.float64) / DISP_SCALE, raw > 0


def write_flow_png(path, flow, valid=None, clip: bool = False):
    """Store ``round(f * 64 + 2^15)`` for u and v plus a validity channel."""
    flow = np.asarray(flow, dtype=np.float64)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    finite = np.all(np.isfinite(flow), axis=-1)
    valid = finite if valid is None else (np.asarray(valid, dtype=bool) & finite)
    stored = np.full(flow.shape, FLOW_OFFSET)
    stored[valid] = np.round(flow[valid] * FLOW_SCALE + FLOW_OFFSET)
    if clip:
        stored = np.clip(stored, 0, 65535)
    elif np.any(stored < 0) or np.any(stored > 65535):
        raise ValueError(f"{path}: flow magnitude exceeds the 16-bit range (|f| < 512)")
    out = np.empty(flow.shape[:2] + (3,), dtype=np.uint16)
    # OpenCV stores BGR: blue = valid, green = v, red = u
    out[..., 2] = stored[..., 0]
    out[..., 1] = stored[..., 1]
    out[..., 0] = valid
    _imwrite(path, out)


def read_flow_png(path):
    """``(flow (H, W, 2), valid)``."""
    raw = _imread16(path, 3)
    flow = np.stack([raw[..., 2], raw[..., 1]], axis=-1).astype(np.float64)
    flow = (flow - FLOW_OFFSET) / FLOW_SCALE
    return flow, raw[..., 0] > 0


def write_mask_png(path, mask):
    _imwrite(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask_png(path):
    if not os.path.exists(str(path)):
        raise FileNotFoundError(str(path))
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise ValueError(f"{path}: unreadable mask")
    return img > 127


def write_image_png(path, rgb):
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    _imwrite(path, img[..., ::-1])


def read_image_png(path):
    if not os.path.exists(str(path)):
        raise FileNotFoundError(str(path))
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise ValueError(f"{path}: unreadable image")
    return img[..., ::-1].astype(np.float64) / 255.0


def _tag(direction: str) -> str:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    return "fw" if direction == FORWARD else "bw"


def field_paths(root, sample_id: str, direction: str) -> Dict[str, Path]:
    root = Path(root)
    t = _tag(direction)
    return {
        f"flow_{t}": root / f"flow_{t}" / f"{sample_id}.png",
        "disp0": root / "disp0" / f"{sample_id}.png",
        f"disp1_{t}": root / f"disp1_{t}" / f"{sample_id}.png",
    }


def write_field(root, sample_id: str, fld: SceneFlowField, clip: bool = False, write_d0: bool = True):
    """Write one field into the dataset layout under ``root``."""
    paths = field_paths(root, sample_id, fld.direction)
    t = _tag(fld.direction)
    valid = fld.mask
    write_flow_png(paths[f"flow_{t}"], fld.data[..., :2], valid, clip=clip)
    if write_d0:
        write_disparity_png(paths["disp0"], fld.d0, valid, clip=clip)
    write_disparity_png(paths[f"disp1_{t}"], fld.d1, valid, clip=clip)


def load_external_field(root, direction: str, sample_id: str) -> SceneFlowField:
    """Assemble a field and its validity mask from the three component files."""
    paths = field_paths(root, sample_id, direction)
    for name, p in paths.items():
        if not p.exists():
            raise FileNotFoundError(f"sample {sample_id}: missing {name} component at {p}")
    t = _tag(direction)
    flow, v_flow = read_flow_png(paths[f"flow_{t}"])
    d0, v_d0 = read_disparity_png(paths["disp0"])
    d1, v_d1 = read_disparity_png(paths[f"disp1_{t}"])
    if not (flow.shape[:2] == d0.shape == d1.shape):
        raise ValueError(
            f"sample {sample_id}: component sizes differ "
            f"(flow {flow.shape[:2]}, disp0 {d0.shape}, disp1 {d1.shape})"
        )
    data = np.concatenate([flow, d0[..., None], d1[..., None]], axis=-1)
    return SceneFlowField(data, direction, v_flow & v_d0 & v_d1)


# --- samples and manifests ---------------------------------------------


def write_sample(root, sample: FrameTripletSample):
    root = Path(root)
    sid = sample.sample_id
    if not sid:
        raise ValueError("samples need a non-empty sample_id to be written")
    for (side, t), img in sample.images.items():
        folder = "image_2" if side == "left" else "image_3"
        write_image_png(root / folder / f"{sid}_{FRAME_SUFFIX[t]}.png", img)
    write_field(root, sid, sample.gt_forward.replace(valid=sample.valid_fw))
    write_mask_png(root / "mask_noc_fw" / f"{sid}.png", sample.noc_fw)
    if sample.has_backward:
        write_field(root, sid, sample.gt_backward.replace(valid=sample.valid_bw), write_d0=False)
        write_mask_png(root / "mask_noc_bw" / f"{sid}.png", sample.noc_bw)
    if "scene" in sample.meta:
        (root / "scene").mkdir(parents=True, exist_ok=True)
        (root / "scene" / f"{sid}.txt").write_text(sample.meta["scene"])


@dataclass
class SampleRecord:
    sample_id: str
    paths: Dict[str, Path]


@dataclass
class DatasetManifest:
    root: Path
    split: str
    samples: List[SampleRecord] = field(default_factory=list)
    header: Dict[str, Dict[str, str]] = field(default_factory=dict)

    @property
    def ids(self) -> List[str]:
        return [r.sample_id for r in self.samples]

    def __len__(self):
        return len(self.samples)


def _sample_paths(root: Path, sid: str) -> Dict[str, Path]:
    paths = {}
    for side, folder in (("left", "image_2"), ("right", "image_3")):
        for t, suffix in FRAME_SUFFIX.items():
            paths[f"{side}{t:+d}"] = root / folder / f"{sid}_{suffix}.png"
    paths.update(field_paths(root, sid, FORWARD))
    paths.update(field_paths(root, sid, BACKWARD))
    paths["mask_noc_fw"] = root / "mask_noc_fw" / f"{sid}.png"
    paths["mask_noc_bw"] = root / "mask_noc_bw" / f"{sid}.png"
    paths["scene"] = root / "scene" / f"{sid}.txt"
    return paths


_MANDATORY = ("flow_fw", "disp0", "disp1_fw", "mask_noc_fw")
_BACKWARD_KEYS = ("flow_bw", "disp1_bw", "mask_noc_bw")


def write_manifest(path, sample_ids: Sequence[str], split: str = "train", extra: Optional[Dict[str, Dict]] = None):
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    cp = configparser.ConfigParser(allow_no_value=True, interpolation=None)
    cp.optionxform = str
    cp["manifest"] = {"format": "dtf-dataset-v1", "split": split}
    for name, section in (extra or {}).items():
        cp[name] = {k: str(v) for k, v in section.items()}
    cp.add_section("samples")
    for sid in sample_ids:
        cp.set("samples", str(sid), None)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        cp.write(fh)


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest and check every mandatory file exists."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    cp = configparser.ConfigParser(allow_no_value=True, interpolation=None)
    cp.optionxform = str
    cp.read(path)
    if not cp.has_section("manifest") or not cp.has_section("samples"):
        raise ValueError(f"{path}: manifest needs [manifest] and [samples] sections")
    split = cp.get("manifest", "split", fallback="train")
    root = path.parent
    records = []
    for sid in cp.options("samples"):
        paths = _sample_paths(root, sid)
        for key in _MANDATORY:
            if not paths[key].exists():
                raise FileNotFoundError(f"sample {sid}: missing mandatory file {paths[key]}")
        records.append(SampleRecord(sid, paths))
    header = {s: dict(cp[s]) for s in cp.sections() if s != "samples"}
    return DatasetManifest(root, split, records, header)


def load_sample(record: SampleRecord, root) -> FrameTripletSample:
    p = record.paths
    sid = record.sample_id
    images = {}
    for side in ("left", "right"):
        for t in FRAME_SUFFIX:
            key = f"{side}{t:+d}"
            if p[key].exists():
                images[(side, t)] = read_image_png(p[key])
    gt_fw = load_external_field(root, FORWARD, sid)
    noc_fw = read_mask_png(p["mask_noc_fw"]) & gt_fw.mask
    kwargs = {}
    if all(p[k].exists() for k in _BACKWARD_KEYS):
        gt_bw = load_external_field(root, BACKWARD, sid)
        kwargs = dict(gt_backward=gt_bw, valid_bw=gt_bw.mask, noc_bw=read_mask_png(p["mask_noc_bw"]) & gt_bw.mask)
    meta = {}
    if p["scene"].exists():
        meta["scene"] = p["scene"].read_text()
    if "gt_backward" not in kwargs:
        meta["gt_backward_absent"] = "1"
    return FrameTripletSample(images, gt_fw, gt_fw.mask, noc_fw, sample_id=sid, meta=meta, **kwargs)


def iterate_samples(manifest: DatasetManifest) -> Iterator[FrameTripletSample]:
    """Lazily load samples in manifest order."""
    for record in manifest.samples:
        yield load_sample(record, manifest.root)


def save_dataset(root, samples: Sequence[FrameTripletSample], split: str = "train", extra=None) -> Path:
    root = Path(root)
    for s in samples:
        write_sample(root, s)
    path = root / "manifest.txt"
    write_manifest(path, [s.sample_id for s in samples], split, extra)
    return path
