"""Flow orientation geometry.

Under pure camera translation t = (t_x, t_y, t_z) the image flow at a
pixel with centered coordinates (x, y) points along
arctan2(t_z*y - t_y*f, t_z*x - t_x*f), independent of scene depth. This
module converts observed flow to orientation fields, predicts the
orientation field of a translation hypothesis, builds the hypothesis
library sampled over the forward unit hemisphere, and refines a
hypothesis by projected gradient descent on the sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .flowio import FlowField

DEFAULT_ZERO_MOTION_THRESHOLD = 0.5  # pixels/frame, per-component

# Sentinel component for pixels whose flow magnitude is below threshold in
# both axes; such pixels carry no usable orientation and are never sampled.
ZERO_MOTION = -1


class EmptyPixelSetError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics: focal length and principal point, in pixels."""

    f: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.f <= 0:
            raise ValueError("focal length must be positive")

    @classmethod
    def default(cls, width: int, height: int, f: float | None = None) -> "CameraIntrinsics":
        """Principal point at the image center, focal length max(w, h)."""
        return cls(
            f=float(f) if f is not None else float(max(width, height)),
            cx=(width - 1) / 2.0,
            cy=(height - 1) / 2.0,
        )


@dataclass
class OrientationField:
    """Per-pixel flow angles in (-pi, pi] plus a validity mask."""

    angle: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.angle = np.asarray(self.angle, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.angle.shape != self.valid.shape or self.angle.ndim != 2:
            raise ValueError("angle and valid must be 2-D arrays of equal shape")

    @property
    def height(self) -> int:
        return self.angle.shape[0]

    @property
    def width(self) -> int:
        return self.angle.shape[1]


def normalize_hypothesis(t) -> np.ndarray:
    """Return t scaled to unit length; rejects the zero vector."""
    t = np.asarray(t, dtype=np.float64).reshape(3)
    n = float(np.linalg.norm(t))
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("motion hypothesis must be a non-zero finite vector")
    return t / n


def wrap_angle(a):
    """Wrap angles into (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    out = np.where(out == -np.pi, np.pi, out)
    return out if out.ndim else float(out)


def angular_residual(a, b):
    """Signed circular difference a - b, wrapped into (-pi, pi]."""
    return wrap_angle(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))


def _into_half_open(a: np.ndarray) -> np.ndarray:
    # arctan2 yields [-pi, pi]; fold the closed -pi endpoint onto +pi
    return np.where(a == -np.pi, np.pi, a)


def flow_to_orientation(flow: FlowField, threshold: float = DEFAULT_ZERO_MOTION_THRESHOLD) -> OrientationField:
    """Convert a flow field to orientations, masking zero-motion pixels.

    A pixel is zero-motion (invalid) when both |u| and |v| fall below
    `threshold`.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    u = flow.u.astype(np.float64)
    v = flow.v.astype(np.float64)
    angle = _into_half_open(np.arctan2(v, u))
    valid = ~((np.abs(u) < threshold) & (np.abs(v) < threshold))
    return OrientationField(angle=angle, valid=valid)


def centered_coords(width: int, height: int, intrinsics: CameraIntrinsics):
    """Pixel coordinate grids relative to the principal point."""
    x = np.arange(width, dtype=np.float64) - intrinsics.cx
    y = np.arange(height, dtype=np.float64) - intrinsics.cy
    return np.meshgrid(x, y)


def orientation_field(t, intrinsics: CameraIntrinsics, width: int, height: int) -> OrientationField:
    """Predicted orientation field of a translation hypothesis.

    All pixels are valid except a focus-of-expansion pixel (both
    arctan2 arguments zero), where the orientation is undefined.
    """
    t = normalize_hypothesis(t)
    x, y = centered_coords(width, height, intrinsics)
    ay = t[2] * y - t[1] * intrinsics.f
    ax = t[2] * x - t[0] * intrinsics.f
    angle = _into_half_open(np.arctan2(ay, ax))
    foe = (ay == 0.0) & (ax == 0.0)
    angle = np.where(foe, 0.0, angle)
    return OrientationField(angle=angle, valid=~foe)


class MotionLibrary:
    """Translation hypotheses with their precomputed orientation fields.

    `hypotheses` is an (N, 3) array of unit vectors; `fields[i]` is the
    orientation field of `hypotheses[i]` on the library's pixel grid.
    The zero-motion pseudo-hypothesis is not an indexed entry; it is the
    shared sentinel `ZERO_MOTION`.
    """

    zero_motion = ZERO_MOTION

    def __init__(self, hypotheses, fields, intrinsics: CameraIntrinsics, width: int, height: int):
        self.hypotheses = [normalize_hypothesis(h) for h in hypotheses]
        self.fields = list(fields)
        self.intrinsics = intrinsics
        self.width = width
        self.height = height
        if len(self.hypotheses) != len(self.fields):
            raise ValueError("one precomputed field per hypothesis required")

    def __len__(self) -> int:
        return len(self.hypotheses)

    def copy(self) -> "MotionLibrary":
        """Shallow copy; per-run refinement appends stay local to the copy."""
        return MotionLibrary(
            list(self.hypotheses), list(self.fields), self.intrinsics, self.width, self.height
        )

    def append(self, t) -> int:
        """Add a hypothesis (with its field) and return its index."""
        t = normalize_hypothesis(t)
        self.hypotheses.append(t)
        self.fields.append(orientation_field(t, self.intrinsics, self.width, self.height))
        return len(self.hypotheses) - 1


# Hemisphere sampling: polar rings denser near the equator, where the
# orientation fields change fastest, plus one near-pole sample and the pole.
_RING_SPEC = ((90.0, 16), (67.5, 16), (45.0, 8), (22.5, 4), (11.25, 1))


def hemisphere_directions() -> np.ndarray:
    """46 unit directions with t_z >= 0, ring-major, azimuth-ascending."""
    dirs = []
    for theta_deg, count in _RING_SPEC:
        theta = math.radians(theta_deg)
        sz, cz = math.sin(theta), math.cos(theta)
        for i in range(count):
            phi = 2.0 * math.pi * i / count
            dirs.append((sz * math.cos(phi), sz * math.sin(phi), cz))
    dirs.append((0.0, 0.0, 1.0))
    arr = np.array(dirs, dtype=np.float64)
    arr[np.abs(arr) < 1e-15] = 0.0
    arr /= np.linalg.norm(arr, axis=1, keepdims=True)
    return arr


def build_library(intrinsics: CameraIntrinsics, width: int, height: int) -> MotionLibrary:
    """Build the 46-hypothesis base library for the given image grid."""
    dirs = hemisphere_directions()
    fields = [orientation_field(d, intrinsics, width, height) for d in dirs]
    return MotionLibrary(dirs, fields, intrinsics, width, height)


def _objective_flat(t, obs_angle, xc, yc, f) -> float:
    """Mean |wrapped residual| between obs and the field of t, on flat arrays."""
    ay = t[2] * yc - t[1] * f
    ax = t[2] * xc - t[0] * f
    pred = np.arctan2(ay, ax)
    resid = np.abs(wrap_angle(obs_angle - pred))
    # orientation undefined at an exact focus of expansion: charge the max
    foe = (ay == 0.0) & (ax == 0.0)
    if foe.any():
        resid = np.where(foe, np.pi, resid)
    return float(resid.mean())


def _flat_pixel_set(obs: OrientationField, pixel_set, intrinsics: CameraIntrinsics):
    pixel_set = np.asarray(pixel_set, dtype=bool)
    if pixel_set.shape != obs.angle.shape:
        raise ValueError("pixel set shape must match the orientation field")
    if not pixel_set.any():
        raise EmptyPixelSetError("pixel set is empty")
    if not obs.valid[pixel_set].all():
        raise ValueError("pixel set includes zero-motion pixels")
    x, y = centered_coords(obs.width, obs.height, intrinsics)
    return obs.angle[pixel_set], x[pixel_set], y[pixel_set]


def fof_l1_objective(t, obs: OrientationField, pixel_set, intrinsics: CameraIntrinsics) -> float:
    """Mean absolute wrapped residual of obs against the field of t."""
    t = normalize_hypothesis(t)
    a, xc, yc = _flat_pixel_set(obs, pixel_set, intrinsics)
    return _objective_flat(t, a, xc, yc, intrinsics.f)


def refine_motion(
    start,
    obs: OrientationField,
    pixel_set,
    intrinsics: CameraIntrinsics,
    max_iters: int = 50,
    grad_step: float = 1e-4,
    initial_step: float = 0.1,
    max_halvings: int = 20,
    tol: float = 1e-6,
    trace: list | None = None,
) -> np.ndarray:
    """Descend the mean-L1 orientation objective on the unit sphere.

    Projected gradient descent with central-difference gradients and a
    backtracking (halving) line search. Deterministic; the returned unit
    hypothesis never scores worse than `start`.
    """
    t = normalize_hypothesis(start)
    a, xc, yc = _flat_pixel_set(obs, pixel_set, intrinsics)
    f = intrinsics.f

    current = _objective_flat(t, a, xc, yc, f)
    if trace is not None:
        trace.append(current)

    for _ in range(max_iters):
        grad = np.zeros(3)
        for i in range(3):
            tp = t.copy()
            tm = t.copy()
            tp[i] += grad_step
            tm[i] -= grad_step
            grad[i] = (_objective_flat(tp, a, xc, yc, f) - _objective_flat(tm, a, xc, yc, f)) / (
                2.0 * grad_step
            )
        tangent = grad - np.dot(grad, t) * t
        norm = float(np.linalg.norm(tangent))
        if norm < 1e-12:
            break
        direction = tangent / norm

        step = initial_step
        accepted = None
        for _ in range(max_halvings + 1):
            cand = t - step * direction
            cand /= np.linalg.norm(cand)
            value = _objective_flat(cand, a, xc, yc, f)
            if value < current:
                accepted = (cand, value)
                break
            step *= 0.5
        if accepted is None:
            break
        improvement = current - accepted[1]
        t, current = accepted
        if trace is not None:
            trace.append(current)
        if improvement < tol:
            break
    return t
