"""Placement transforms, pinhole camera math and planar pose algebra.

Conventions
-----------
Camera frame: x forward (depth), y left, z up.  Image u-axis points right,
v-axis points down.  Normalized image coordinates run from -1 (first pixel
center) to +1 (last pixel center) along each axis.

A placement transform maps patch-normalized coordinates to image-normalized
coordinates; ``t = (tx, ty)`` is where the patch center lands, so positive
``tx`` moves the patch right and positive ``ty`` moves it down.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SCALE_MIN = 0.2
SCALE_MAX = 0.4
TRANSLATION_EPS = 1e-6
NUM_FACES = 4


@dataclass(frozen=True)
class TransformParams:
    s: float
    tx: float
    ty: float
    alpha: float = 0.0

    @property
    def t(self) -> tuple[float, float]:
        return (self.tx, self.ty)

    def as_array(self) -> np.ndarray:
        return np.array([self.s, self.tx, self.ty])


@dataclass(frozen=True)
class CameraModel:
    fx: float = 100.0
    fy: float = 100.0
    cx: float = 80.0
    cy: float = 48.0
    width: int = 160
    height: int = 96

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = math.fmod(a, 2 * math.pi)
    if a <= -math.pi:
        a += 2 * math.pi
    elif a > math.pi:
        a -= 2 * math.pi
    return a


@dataclass(frozen=True)
class Pose:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), 0.0)

    def __repr__(self):
        x, y, z = self.position
        return f"Pose(({x:.4g}, {y:.4g}, {z:.4g}), yaw={self.yaw:.4g})"


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose_pose(a: Pose, b: Pose) -> Pose:
    """Rigid composition ``a * b``: ``b`` expressed in the frame of ``a``."""
    return Pose(a.position + _rot_z(a.yaw) @ b.position, a.yaw + b.yaw)


def invert_pose(a: Pose) -> Pose:
    return Pose(-(_rot_z(-a.yaw) @ a.position), -a.yaw)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose_pose(invert_pose(a), b)


def make_affine(p: TransformParams) -> np.ndarray:
    c, s = math.cos(p.alpha), math.sin(p.alpha)
    return np.array([
        [p.s * c, -p.s * s, p.tx],
        [p.s * s, p.s * c, p.ty],
        [0.0, 0.0, 1.0],
    ])


def make_affine_torch(s, tx, ty, alpha=None):
    """Batched differentiable version of :func:`make_affine`.

    All arguments are tensors of a common shape ``(...)``; returns ``(..., 3, 3)``.
    """
    import torch

    if alpha is None:
        alpha = torch.zeros_like(s)
    c, sn = torch.cos(alpha), torch.sin(alpha)
    zero, one = torch.zeros_like(s), torch.ones_like(s)
    rows = [
        torch.stack([s * c, -s * sn, tx], dim=-1),
        torch.stack([s * sn, s * c, ty], dim=-1),
        torch.stack([zero, zero, one], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def invert_affine(m: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a scaled-rotation affine matrix."""
    m = np.asarray(m, dtype=float)
    a, b, tx = m[0]
    c, d, ty = m[1]
    det = a * d - b * c
    # det = s^2 for a scaled rotation
    if abs(det) < 1e-18:
        raise ValueError("singular transform")
    inv2 = np.array([[d, -b], [-c, a]]) / det
    out = np.eye(3)
    out[:2, :2] = inv2
    out[:2, 2] = -inv2 @ np.array([tx, ty])
    return out


def project_point(cam: CameraModel, p_cam) -> np.ndarray:
    x, y, z = (float(v) for v in p_cam)
    if x <= 0:
        raise ValueError("behind camera")
    return np.array([cam.cx - cam.fx * y / x, cam.cy - cam.fy * z / x])


def face_yaw(patch_index: int) -> float:
    """Attacker yaw (relative to the victim camera) that shows face ``patch_index``."""
    return wrap_angle(math.pi + patch_index * math.pi / 2)


def visible_face(relative_yaw: float) -> int:
    """Index of the cuboid face pointing back at the camera."""
    return int(round((relative_yaw - math.pi) / (math.pi / 2))) % NUM_FACES


def patch_height_m(cam: CameraModel, patch_width_m: float) -> float:
    """Physical patch height implied by a frame-proportional placement."""
    return patch_width_m * (cam.height / cam.width) * (cam.fx / cam.fy)


def patch_transform_to_relative_pose(cam: CameraModel, p: TransformParams,
                                     patch_width_m: float = 0.4,
                                     patch_index: int = 0) -> Pose:
    """Pose (in the victim camera frame) at which a planar patch appears with ``p``."""
    if p.s < SCALE_MIN - 1e-9:
        raise ValueError("patch too small to resolve depth")
    if not 0 <= patch_index < NUM_FACES:
        raise ValueError(f"patch_index must be in 0..{NUM_FACES - 1}")
    depth = cam.fx * patch_width_m / (p.s * cam.width)
    y = -(p.tx * cam.width / 2) * depth / cam.fx
    z = -(p.ty * cam.height / 2) * depth / cam.fy
    return Pose(np.array([depth, y, z]), face_yaw(patch_index))


def relative_pose_to_patch_transform(cam: CameraModel, rel: Pose,
                                     patch_width_m: float = 0.4) -> TransformParams:
    """Inverse of :func:`patch_transform_to_relative_pose` (no clamping)."""
    depth, y, z = rel.position
    if depth <= 0:
        raise ValueError("behind camera")
    s = cam.fx * patch_width_m / (depth * cam.width)
    tx = -y * cam.fx / depth / (cam.width / 2)
    ty = -z * cam.fy / depth / (cam.height / 2)
    return TransformParams(s, tx, ty)


def patch_corners_m(cam: CameraModel, pose: Pose, patch_width_m: float = 0.4) -> np.ndarray:
    """Camera-frame corners of a fronto-parallel patch centered at ``pose``.

    Order: top-left, top-right, bottom-right, bottom-left as seen by the camera.
    """
    hw = patch_width_m / 2
    hh = patch_height_m(cam, patch_width_m) / 2
    x, y, z = pose.position
    return np.array([
        [x, y + hw, z + hh],
        [x, y - hw, z + hh],
        [x, y - hw, z - hh],
        [x, y + hw, z - hh],
    ])


def transform_from_pixel_corners(cam: CameraModel, corners_px: np.ndarray) -> TransformParams:
    """Recover (s, tx, ty) from the pixel bounding box of a placed patch."""
    corners_px = np.asarray(corners_px, dtype=float)
    u0, v0 = corners_px.min(axis=0)
    u1, v1 = corners_px.max(axis=0)
    s = (u1 - u0) / cam.width
    tx = ((u0 + u1) / 2 - cam.cx) / (cam.width / 2)
    ty = ((v0 + v1) / 2 - cam.cy) / (cam.height / 2)
    return TransformParams(s, tx, ty)
