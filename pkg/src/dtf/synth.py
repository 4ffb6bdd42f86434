"""Synthetic stereo sequences with analytic scene flow and occlusion ground truth.

Scenes are textured, fronto-parallel rectangles in front of an infinite
background plane, observed by a rectified stereo rig at times -1, 0 and +1.
World coordinates coincide with the left camera at the reference time
(x right, y down, z forward).  Objects move with constant acceleration
``p(t) = p0 + v t + a t^2 / 2``; the camera does the same and may rotate
with a constant yaw/pitch rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .core import BACKWARD, FORWARD, FrameTripletSample, SceneFlowField

TIMES = (-1, 0, 1)
MIN_DEPTH = 1e-3
_OCCLUSION_RTOL = 1e-9
_BOUNDS_TOL = 1e-9

Vec3 = Tuple[float, float, float]


@dataclass(frozen=True)
class ObjectSpec:
    extent: Tuple[float, float]
    position: Vec3
    velocity: Vec3 = (0.0, 0.0, 0.0)
    acceleration: Vec3 = (0.0, 0.0, 0.0)
    texture_seed: int = 0

    def center(self, t: float) -> np.ndarray:
        p = np.asarray(self.position, dtype=np.float64)
        return p + np.asarray(self.velocity) * t + 0.5 * np.asarray(self.acceleration) * t * t


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 64
    focal: float = 48.0
    baseline: float = 1.0
    background_depth: float = 20.0
    objects: Tuple[ObjectSpec, ...] = ()
    camera_velocity: Vec3 = (0.0, 0.0, 0.0)
    camera_acceleration: Vec3 = (0.0, 0.0, 0.0)
    camera_rotation: Tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if self.focal <= 0 or self.baseline <= 0:
            raise ValueError("focal length and baseline must be positive")
        if self.background_depth <= 0:
            raise ValueError("background depth must be positive")
        object.__setattr__(self, "objects", tuple(self.objects))

    # plain-text key-value form, one entry per line
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            if f.name == "objects":
                continue
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        lines.append(f"n_objects = {len(self.objects)}")
        for i, obj in enumerate(self.objects):
            for f in fields(obj):
                lines.append(f"object.{i}.{f.name} = {_fmt(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SceneConfig":
        entries: Dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#") or line.startswith("["):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed scene config line: {raw!r}")
            entries[key.strip()] = value.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name == "objects" or f.name not in entries:
                continue
            kwargs[f.name] = _parse(entries[f.name], f.type)
        objects = []
        for i in range(int(entries.get("n_objects", 0))):
            okw = {}
            for f in fields(ObjectSpec):
                key = f"object.{i}.{f.name}"
                if key in entries:
                    okw[f.name] = _parse(entries[key], f.type)
            objects.append(ObjectSpec(**okw))
        return cls(objects=tuple(objects), **kwargs)


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return " ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, type_name):
    type_name = str(type_name)
    if "Tuple" in type_name or "Vec3" in type_name:
        return tuple(float(v) for v in text.split())
    if type_name in ("int", "<class 'int'>"):
        return int(text)
    return float(text)


def _rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world rotation: yaw about y, then pitch about x."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return ry @ rx


@dataclass
class SceneInstance:
    """A config resolved into camera poses and object centers per time step."""

    config: SceneConfig
    camera_centers: Dict[int, np.ndarray] = field(default_factory=dict)
    camera_rotations: Dict[int, np.ndarray] = field(default_factory=dict)
    object_centers: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def disparity_scale(self) -> float:
        return self.config.focal * self.config.baseline

    @property
    def principal_point(self) -> Tuple[float, float]:
        c = self.config
        return (c.width - 1) / 2.0, (c.height - 1) / 2.0

    def camera(self, t: int, side: str = "left"):
        center = self.camera_centers[t]
        rot = self.camera_rotations[t]
        if side == "right":
            center = center + rot @ np.array([self.config.baseline, 0.0, 0.0])
        elif side != "left":
            raise ValueError(f"unknown camera side {side!r}")
        return center, rot

    def project(self, points: np.ndarray, t: int, side: str = "left"):
        """World points ``(..., 3)`` to pixel coordinates and camera depth."""
        center, rot = self.camera(t, side)
        pc = (points - center) @ rot  # rot.T applied to row vectors
        cx, cy = self.principal_point
        f = self.config.focal
        z = pc[..., 2]
        return f * pc[..., 0] / z + cx, f * pc[..., 1] / z + cy, z

    def raycast(self, t: int, xs: np.ndarray, ys: np.ndarray, side: str = "left"):
        """Nearest surface along the rays through pixel positions ``(xs, ys)``.

        Returns ``(depth, surface, world_points)`` where ``surface`` is -1 for
        the background, the object index otherwise, and -2 where nothing is hit.
        """
        cfg = self.config
        center, rot = self.camera(t, side)
        cx, cy = self.principal_point
        rays = np.stack([(xs - cx) / cfg.focal, (ys - cy) / cfg.focal, np.ones_like(xs, dtype=np.float64)], -1)
        dirs = rays @ rot.T
        dz = dirs[..., 2]
        depth = np.full(xs.shape, np.inf)
        surface = np.full(xs.shape, -2, dtype=np.int64)
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (cfg.background_depth - center[2]) / dz
        hit = (dz > 0) & (lam > 0)
        depth[hit] = lam[hit]
        surface[hit] = -1
        for i, obj in enumerate(cfg.objects):
            oc = self.object_centers[t][i]
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = (oc[2] - center[2]) / dz
            px = center[0] + lam * dirs[..., 0]
            py = center[1] + lam * dirs[..., 1]
            w, h = obj.extent
            inside = (
                (dz > 0) & (lam > 0)
                & (np.abs(px - oc[0]) <= w / 2.0)
                & (np.abs(py - oc[1]) <= h / 2.0)
            )
            closer = inside & (lam < depth)
            depth[closer] = lam[closer]
            surface[closer] = i
        points = center + np.where(np.isfinite(depth), depth, 0.0)[..., None] * dirs
        return depth, surface, points


def resolve(config: SceneConfig) -> SceneInstance:
    """Resolve trajectories and check every surface stays in front of the camera."""
    inst = SceneInstance(config)
    yaw, pitch = config.camera_rotation
    for t in TIMES:
        inst.camera_centers[t] = (
            np.asarray(config.camera_velocity, dtype=np.float64) * t
            + 0.5 * np.asarray(config.camera_acceleration, dtype=np.float64) * t * t
        )
        inst.camera_rotations[t] = _rotation(yaw * t, pitch * t)
        inst.object_centers[t] = np.array([o.center(t) for o in config.objects]).reshape(-1, 3)
    for t in TIMES:
        center, rot = inst.camera(t)
        if (np.array([0.0, 0.0, config.background_depth]) - center) @ rot[:, 2] <= MIN_DEPTH:
            raise ValueError(f"background plane is behind the camera at t={t:+d}")
        for i, obj in enumerate(config.objects):
            oc = inst.object_centers[t][i]
            w, h = obj.extent
            corners = oc + np.array([[sx * w / 2, sy * h / 2, 0.0] for sx in (-1, 1) for sy in (-1, 1)])
            for side in ("left", "right"):
                _, _, z = inst.project(corners, t, side)
                if np.any(z <= MIN_DEPTH):
                    raise ValueError(f"object {i} is behind the camera at t={t:+d}")
    return inst


def _pixel_grid(cfg: SceneConfig):
    ys, xs = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    return xs, ys


def _surface_motion(inst: SceneInstance, surface: np.ndarray, t: int) -> np.ndarray:
    """Displacement ``(..., 3)`` of each surface between time 0 and ``t``."""
    out = np.zeros(surface.shape + (3,))
    for i in range(len(inst.config.objects)):
        sel = surface == i
        out[sel] = inst.object_centers[t][i] - inst.object_centers[0][i]
    return out


def _target_time(direction: str) -> int:
    if direction == FORWARD:
        return 1
    if direction == BACKWARD:
        return -1
    raise ValueError(f"unknown direction {direction!r}")


def _trace_reference(inst: SceneInstance, direction: str):
    cfg = inst.config
    xs, ys = _pixel_grid(cfg)
    depth, surface, points = inst.raycast(0, xs, ys)
    if np.any(surface == -2):
        raise ValueError("some reference pixels see no surface")
    t = _target_time(direction)
    moved = points + _surface_motion(inst, surface, t)
    tx, ty, tz = inst.project(moved, t)
    return xs, ys, depth, tx, ty, tz, t


def analytic_field(scene: SceneInstance, direction: str) -> SceneFlowField:
    """Exact image-space scene flow from the reference view to time t+-1."""
    xs, ys, depth, tx, ty, tz, _ = _trace_reference(scene, direction)
    k = scene.disparity_scale
    data = np.stack([tx - xs, ty - ys, k / depth, k / tz], axis=-1)
    return SceneFlowField(data, direction)


def occlusion_masks(scene: SceneInstance, direction: str):
    """``(valid, noc)`` masks for one direction.

    A reference pixel is occluded when its point lands outside the pixel-center
    extent of the target image, or a strictly nearer surface covers that
    location at the target time.  Every pixel has ground truth, so ``valid``
    is all true.
    """
    cfg = scene.config
    xs, ys, depth, tx, ty, tz, t = _trace_reference(scene, direction)
    tol = _BOUNDS_TOL
    inside = (tx >= -tol) & (tx <= cfg.width - 1 + tol) & (ty >= -tol) & (ty <= cfg.height - 1 + tol)
    hit_depth, _, _ = scene.raycast(t, tx, ty)
    covered = hit_depth < tz * (1.0 - _OCCLUSION_RTOL)
    noc = inside & ~covered
    valid = np.ones(noc.shape, dtype=bool)
    return valid, noc


def _hash_u64(*parts):
    """SplitMix64-style mixing of integer arrays."""
    with np.errstate(over="ignore"):
        h = np.uint64(0x9E3779B97F4A7C15)
        for p in parts:
            h = h ^ (np.asarray(p).astype(np.int64).astype(np.uint64) + np.uint64(0x9E3779B97F4A7C15))
            h = (h ^ (h >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            h = (h ^ (h >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            h = h ^ (h >> np.uint64(31))
    return h


def _texture(ix, iy, seed):
    h = _hash_u64(ix, iy, seed)
    rgb = [((h >> np.uint64(s)) & np.uint64(0xFF)).astype(np.float64) / 255.0 for s in (0, 8, 16)]
    return np.stack(rgb, axis=-1)


def render(scene: SceneInstance, t: int, side: str = "left", cell: float = 0.25) -> np.ndarray:
    """Flat-shaded view at pixel centers, values in [0, 1]."""
    cfg = scene.config
    xs, ys = _pixel_grid(cfg)
    _, surface, points = scene.raycast(t, xs, ys, side)
    img = np.zeros((cfg.height, cfg.width, 3))
    bg = surface == -1
    if bg.any():
        p = points[bg]
        img[bg] = _texture(np.floor(p[:, 0] / (2 * cell)), np.floor(p[:, 1] / (2 * cell)), cfg.seed * 7919 + 17)
    for i, obj in enumerate(cfg.objects):
        sel = surface == i
        if not sel.any():
            continue
        local = points[sel] - scene.object_centers[t][i]
        img[sel] = _texture(np.floor(local[:, 0] / cell), np.floor(local[:, 1] / cell), obj.texture_seed)
    return img


def generate_sample(config: SceneConfig, sample_id: str = "") -> FrameTripletSample:
    scene = resolve(config)
    images = {(side, t): render(scene, t, side) for side in ("left", "right") for t in TIMES}
    gt_fw = analytic_field(scene, FORWARD)
    gt_bw = analytic_field(scene, BACKWARD)
    valid_fw, noc_fw = occlusion_masks(scene, FORWARD)
    valid_bw, noc_bw = occlusion_masks(scene, BACKWARD)
    return FrameTripletSample(
        images=images,
        gt_forward=gt_fw,
        valid_fw=valid_fw,
        noc_fw=noc_fw,
        gt_backward=gt_bw,
        valid_bw=valid_bw,
        noc_bw=noc_bw,
        sample_id=sample_id,
        meta={"scene": config.to_text()},
    )


# --- random scene sampling ------------------------------------------------

PRESETS = ("static", "constant", "accelerated", "driving")


def random_scene(
    seed: int,
    preset: str = "driving",
    height: int = 32,
    width: int = 64,
    n_objects: Optional[int] = None,
) -> SceneConfig:
    """Draw a scene from one of the named motion regimes.

    ``static``       nothing moves.
    ``constant``     lateral constant velocities for objects and camera; the
                     backward motion is the exact negative of the forward one.
    ``accelerated``  accelerating forward camera, objects accelerating along
                     their direction of travel (|a| >= 0.2 m/frame^2).
    ``driving``      forward camera plus laterally moving objects at constant
                     velocity; produces motion and out-of-view occlusions.
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {PRESETS}")
    rng = np.random.default_rng(seed)
    focal = 0.75 * width
    baseline = 1.0
    bg_depth = float(rng.uniform(16.0, 24.0))
    n = int(rng.integers(2, 5)) if n_objects is None else n_objects
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0

    cam_v = np.zeros(3)
    cam_a = np.zeros(3)
    if preset == "constant":
        cam_v[:2] = rng.uniform(-0.15, 0.15, 2)
    elif preset == "accelerated":
        cam_v[2] = rng.uniform(0.3, 0.9)
        cam_a[2] = rng.uniform(0.2, 0.5)
    elif preset == "driving":
        cam_v[2] = rng.uniform(0.4, 1.2)
        cam_v[0] = rng.uniform(-0.1, 0.1)

    objects = []
    for k in range(n):
        z = float(rng.uniform(5.0, 12.0))
        px = rng.uniform(0.1 * width, 0.9 * width)
        py = rng.uniform(0.3 * height, 0.8 * height)
        pos = np.array([(px - cx) * z / focal, (py - cy) * z / focal, z])
        extent = (float(rng.uniform(1.0, 3.5)), float(rng.uniform(0.8, 2.5)))
        vel = np.zeros(3)
        acc = np.zeros(3)
        if preset in ("constant", "driving"):
            vel[0] = rng.uniform(-0.6, 0.6)
            vel[1] = rng.uniform(-0.1, 0.1)
        elif preset == "accelerated":
            vel[0] = rng.uniform(-0.5, 0.5)
            vel[2] = rng.uniform(-0.3, 0.3)
            heading = vel / max(np.linalg.norm(vel), 1e-9)
            acc = heading * rng.uniform(0.2, 0.5)
        objects.append(ObjectSpec(extent, tuple(pos), tuple(vel), tuple(acc), int(seed * 131 + k)))
    cfg = SceneConfig(
        height=height,
        width=width,
        focal=focal,
        baseline=baseline,
        background_depth=bg_depth,
        objects=tuple(objects),
        camera_velocity=tuple(cam_v),
        camera_acceleration=tuple(cam_a),
        seed=int(seed),
    )
    resolve(cfg)
    return cfg


def generate_dataset(n: int, seed: int = 0, preset: str = "driving", height: int = 32, width: int = 64):
    """``n`` samples with consecutive scene seeds starting at ``seed``."""
    return [
        generate_sample(random_scene(seed + i, preset, height, width), sample_id=f"{seed + i:06d}")
        for i in range(n)
    ]


def with_camera_translation(config: SceneConfig, velocity: Vec3) -> SceneConfig:
    return replace(config, camera_velocity=tuple(float(v) for v in velocity))
