"""Synthetic layered-depth scenes with exact translational flow.

The generator is the ground-truth oracle for everything else: it renders
flat-colored layers and independently translating objects, and emits the
exact flow each pixel would show under the pinhole translation model
(per-pixel flow is (t_z*x - t_x*f, t_z*y - t_y*f) / Z in centered
coordinates). Objects use the relative translation camera - object, so
their orientation patterns stay inside the translational family. Optional
orientation noise rotates each flow vector by a Gaussian angle.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .flowio import FlowField
from .orientation import CameraIntrinsics, centered_coords


class InvalidSceneError(ValueError):
    pass


_PALETTE = (
    (84, 110, 138),
    (168, 124, 70),
    (96, 156, 88),
    (204, 188, 72),
    (70, 170, 196),
    (172, 84, 168),
    (150, 150, 150),
    (222, 120, 48),
    (60, 200, 130),
    (128, 64, 210),
    (235, 235, 235),
    (40, 40, 40),
)


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle [x0, x1) x [y0, y1) or half-plane a*x+b*y <= c."""

    kind: str
    params: tuple

    def __post_init__(self):
        if self.kind not in ("rect", "halfplane"):
            raise InvalidSceneError(f"unknown region kind {self.kind!r}")
        n = 4 if self.kind == "rect" else 3
        if len(self.params) != n:
            raise InvalidSceneError(f"{self.kind} region takes {n} parameters")

    def mask(self, width: int, height: int, shift=(0, 0)) -> np.ndarray:
        dx, dy = shift
        px, py = np.meshgrid(np.arange(width), np.arange(height))
        if self.kind == "rect":
            x0, y0, x1, y1 = self.params
            return (px >= x0 + dx) & (px < x1 + dx) & (py >= y0 + dy) & (py < y1 + dy)
        a, b, c = self.params
        return a * (px - dx) + b * (py - dy) <= c

    def center(self, width: int, height: int):
        if self.kind == "rect":
            x0, y0, x1, y1 = self.params
            return ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
        m = self.mask(width, height)
        if not m.any():
            return ((width - 1) / 2.0, (height - 1) / 2.0)
        py, px = np.nonzero(m)
        return (float(px.mean()), float(py.mean()))


@dataclass
class Layer:
    region: Region
    depth: float


@dataclass
class SceneObject:
    region: Region
    depth: float
    translation: tuple


@dataclass
class SceneSpec:
    width: int
    height: int
    camera_translation: tuple
    layers: list[Layer]
    objects: list[SceneObject] = field(default_factory=list)
    focal: float | None = None
    noise_sigma: float = 0.0
    frames: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidSceneError("scene dimensions must be positive")
        if not self.layers:
            raise InvalidSceneError("at least one depth layer is required")
        for lay in self.layers:
            if lay.depth <= 0:
                raise InvalidSceneError("layer depths must be positive")
        for obj in self.objects:
            if obj.depth <= 0:
                raise InvalidSceneError("object depths must be positive")
        if self.noise_sigma < 0:
            raise InvalidSceneError("noise sigma must be non-negative")
        if self.frames < 1:
            raise InvalidSceneError("need at least one frame")

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.default(self.width, self.height, self.focal)


def _point_flow(t, depth: float, xc: float, yc: float, f: float):
    tx, ty, tz = t
    return ((tz * xc - tx * f) / depth, (tz * yc - ty * f) / depth)


def _region_shift(spec: SceneSpec, region: Region, t_eff, depth: float, frame_index: int):
    """Integer-rounded accumulated displacement of a region's content."""
    if frame_index == 0:
        return (0, 0)
    k = spec.intrinsics()
    cx, cy = region.center(spec.width, spec.height)
    u, v = _point_flow(t_eff, depth, cx - k.cx, cy - k.cy, k.f)
    return (
        int(math.floor(frame_index * u + 0.5)),
        int(math.floor(frame_index * v + 0.5)),
    )


def _relative_translation(t_cam, t_obj):
    return tuple(c - o for c, o in zip(t_cam, t_obj))


def _scene_maps(spec: SceneSpec, frame_index: int):
    """Per-pixel (label, color index, depth, effective translation index)."""
    w, h = spec.width, spec.height
    labels = np.zeros((h, w), dtype=np.int32)
    color_idx = np.zeros((h, w), dtype=np.int32)
    depth = np.full((h, w), spec.layers[0].depth, dtype=np.float64)
    trans = [tuple(spec.camera_translation)]
    trans_idx = np.zeros((h, w), dtype=np.int32)

    for i, lay in enumerate(spec.layers):
        shift = _region_shift(spec, lay.region, spec.camera_translation, lay.depth, frame_index)
        m = lay.region.mask(w, h, shift)
        depth[m] = lay.depth
        color_idx[m] = i
        # labels stay 0: every static layer is background

    for j, obj in enumerate(spec.objects):
        t_rel = _relative_translation(spec.camera_translation, obj.translation)
        shift = _region_shift(spec, obj.region, t_rel, obj.depth, frame_index)
        m = obj.region.mask(w, h, shift)
        depth[m] = obj.depth
        labels[m] = j + 1
        color_idx[m] = len(spec.layers) + j
        trans.append(t_rel)
        trans_idx[m] = j + 1

    return labels, color_idx, depth, trans, trans_idx


def flow_from_scene(spec: SceneSpec, frame_index: int = 0):
    """Exact flow field and ground-truth labels for one frame.

    Background pixels follow the camera translation; object pixels follow
    the relative translation (camera - object) at the object's depth.
    """
    if not 0 <= frame_index < spec.frames:
        raise InvalidSceneError(f"frame index {frame_index} outside 0..{spec.frames - 1}")
    labels, _, depth, trans, trans_idx = _scene_maps(spec, frame_index)
    k = spec.intrinsics()
    x, y = centered_coords(spec.width, spec.height, k)

    u = np.zeros_like(x)
    v = np.zeros_like(y)
    for idx, t in enumerate(trans):
        m = trans_idx == idx
        if not m.any():
            continue
        tx, ty, tz = t
        u[m] = (tz * x[m] - tx * k.f) / depth[m]
        v[m] = (tz * y[m] - ty * k.f) / depth[m]

    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed + frame_index)
        theta = rng.normal(0.0, spec.noise_sigma, size=u.shape)
        cos_t, sin_t = np.cos(theta), np.sin(theta)
        u, v = u * cos_t - v * sin_t, u * sin_t + v * cos_t

    return FlowField(u=u.astype(np.float32), v=v.astype(np.float32)), labels


def render_frames(spec: SceneSpec) -> list[np.ndarray]:
    """Flat-colored frames consistent with the generated flow. Deterministic palette."""
    frames = []
    for n in range(spec.frames):
        _, color_idx, _, _, _ = _scene_maps(spec, n)
        img = np.zeros((spec.height, spec.width, 3), dtype=np.uint8)
        for idx in np.unique(color_idx):
            img[color_idx == idx] = _PALETTE[int(idx) % len(_PALETTE)]
        frames.append(img)
    return frames


_GROUP_KEY = re.compile(r"^(layer|object)(\d+)\.(\w+)$")


def parse_scene(text: str) -> SceneSpec:
    """Parse the flat key=value scene grammar.

    Scalar keys: width, height, focal, t_cam=x,y,z, noise_sigma, frames,
    seed. Indexed groups: layerN.region, layerN.depth, objectN.region,
    objectN.depth, objectN.t. Regions: "rect,x0,y0,x1,y1" or
    "halfplane,a,b,c". Lines starting with '#' are comments.
    """
    scalars: dict[str, str] = {}
    groups: dict[tuple[str, int], dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InvalidSceneError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        m = _GROUP_KEY.match(key)
        if m:
            groups.setdefault((m.group(1), int(m.group(2))), {})[m.group(3)] = value
        else:
            scalars[key] = value

    def _require(key):
        if key not in scalars:
            raise InvalidSceneError(f"missing required key {key!r}")
        return scalars[key]

    def _vector(value, n, key):
        parts = [p.strip() for p in value.split(",")]
        if len(parts) != n:
            raise InvalidSceneError(f"{key}: expected {n} comma-separated numbers")
        return tuple(float(p) for p in parts)

    def _region(value, key):
        parts = [p.strip() for p in value.split(",")]
        return Region(kind=parts[0], params=tuple(float(p) for p in parts[1:]))

    width = int(_require("width"))
    height = int(_require("height"))
    t_cam = _vector(_require("t_cam"), 3, "t_cam")

    layers = []
    for _, idx in sorted(k for k in groups if k[0] == "layer"):
        g = groups[("layer", idx)]
        if "region" not in g or "depth" not in g:
            raise InvalidSceneError(f"layer{idx}: needs region and depth")
        layers.append(Layer(region=_region(g["region"], f"layer{idx}"), depth=float(g["depth"])))

    objects = []
    for _, idx in sorted(k for k in groups if k[0] == "object"):
        g = groups[("object", idx)]
        if "region" not in g or "depth" not in g or "t" not in g:
            raise InvalidSceneError(f"object{idx}: needs region, depth and t")
        objects.append(
            SceneObject(
                region=_region(g["region"], f"object{idx}"),
                depth=float(g["depth"]),
                translation=_vector(g["t"], 3, f"object{idx}.t"),
            )
        )

    return SceneSpec(
        width=width,
        height=height,
        camera_translation=t_cam,
        layers=layers,
        objects=objects,
        focal=float(scalars["focal"]) if "focal" in scalars else None,
        noise_sigma=float(scalars.get("noise_sigma", 0.0)),
        frames=int(scalars.get("frames", 1)),
        seed=int(scalars.get("seed", 0)),
    )


def scene_to_text(spec: SceneSpec) -> str:
    """Inverse of parse_scene, for round-tripping specs through the service."""
    lines = [
        f"width={spec.width}",
        f"height={spec.height}",
        "t_cam=%.17g,%.17g,%.17g" % tuple(spec.camera_translation),
        f"noise_sigma={spec.noise_sigma!r}",
        f"frames={spec.frames}",
        f"seed={spec.seed}",
    ]
    if spec.focal is not None:
        lines.append(f"focal={spec.focal!r}")
    for i, lay in enumerate(spec.layers):
        lines.append(f"layer{i}.region={lay.region.kind}," + ",".join("%.17g" % p for p in lay.region.params))
        lines.append(f"layer{i}.depth={lay.depth!r}")
    for i, obj in enumerate(spec.objects):
        lines.append(f"object{i}.region={obj.region.kind}," + ",".join("%.17g" % p for p in obj.region.params))
        lines.append(f"object{i}.depth={obj.depth!r}")
        lines.append(f"object{i}.t=%.17g,%.17g,%.17g" % tuple(obj.translation))
    return "\n".join(lines) + "\n"
