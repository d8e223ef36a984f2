"""Synthetic scenes standing in for the human-following image corpus.

A scene is a textured background with a bright "subject" glyph (an ellipse
torso with a head disk above it) drawn where the labelled pose projects.  A
small dark mark on the head shifts sideways with the subject's yaw.
Rendering is on the integer pixel grid and the result is rounded to whole
grey levels, so scenes survive a PGM round trip unchanged.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import CameraModel
from .pgm import read_pgm, to_uint8, write_pgm

SUBJECT_WIDTH_M = 0.3
TORSO_ASPECT = 1.6
HEAD_RATIO = 0.55
NECK_GAP = 1.1
DEPTH_RANGE = (0.5, 3.0)
LATERAL_RANGE = (-1.0, 1.0)
VERTICAL_RANGE = (-0.5, 0.5)


@dataclass
class Scene:
    image: np.ndarray
    subject_pose: np.ndarray


@dataclass
class Dataset:
    images: np.ndarray  # (n, H, W) float32, integer grey levels
    poses: np.ndarray   # (n, 4) x, y, z, phi
    seed: int | None = None
    cam: CameraModel = field(default_factory=CameraModel)

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i) -> Scene:
        return Scene(self.images[i], self.poses[i])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices, dtype=int)
        return Dataset(self.images[indices], self.poses[indices], self.seed, self.cam)


def background(cam: CameraModel, rng: np.random.Generator) -> np.ndarray:
    """Smooth random texture plus fine grain."""
    coarse = rng.uniform(30.0, 150.0, size=(1, 1, 7, 11))
    smooth = F.interpolate(torch.from_numpy(coarse), size=(cam.height, cam.width),
                           mode="bilinear", align_corners=True)[0, 0].numpy()
    return smooth + rng.normal(0.0, 6.0, size=(cam.height, cam.width))


def glyph_layout(cam: CameraModel, pose, subject_width: float = SUBJECT_WIDTH_M) -> dict:
    """Pixel-space geometry of the subject glyph for a camera-frame pose."""
    x, y, z = (float(v) for v in pose[:3])
    if x <= 0:
        raise ValueError("unlabelable scene")
    u = cam.cx - cam.fx * y / x
    v = cam.cy - cam.fy * z / x
    a = 0.5 * cam.fx * subject_width / x
    b = TORSO_ASPECT * a
    r = HEAD_RATIO * a
    gap = b + NECK_GAP * r
    area_t, area_h = math.pi * a * b, math.pi * r * r
    # shift both parts so the area centroid sits on the projected point
    torso_v = v + area_h * gap / (area_t + area_h)
    return {"u": u, "v": v, "a": a, "b": b, "r": r,
            "torso": (u, torso_v), "head": (u, torso_v - gap)}


def glyph_masks(cam: CameraModel, pose, subject_width: float = SUBJECT_WIDTH_M):
    lay = glyph_layout(cam, pose, subject_width)
    jj = np.arange(cam.width, dtype=float)[None, :]
    ii = np.arange(cam.height, dtype=float)[:, None]
    tu, tv = lay["torso"]
    hu, hv = lay["head"]
    torso = ((jj - tu) / lay["a"]) ** 2 + ((ii - tv) / lay["b"]) ** 2 <= 1.0
    head = (jj - hu) ** 2 + (ii - hv) ** 2 <= lay["r"] ** 2
    phi = float(pose[3]) if len(pose) > 3 else 0.0
    nu = hu + math.sin(phi) * 0.5 * lay["r"]
    nose = (jj - nu) ** 2 + (ii - hv) ** 2 <= (0.35 * lay["r"]) ** 2
    return torso, head, nose & head


def draw_subject(img: np.ndarray, cam: CameraModel, pose,
                 subject_width: float = SUBJECT_WIDTH_M) -> np.ndarray:
    torso, head, nose = glyph_masks(cam, pose, subject_width)
    out = img.copy()
    out[torso] = 200.0
    out[head] = 225.0
    out[nose] = 90.0
    return out


def render_scene(pose, cam: CameraModel | None = None, rng: np.random.Generator | None = None,
                 subject_width: float = SUBJECT_WIDTH_M) -> Scene:
    cam = cam or CameraModel()
    rng = rng if rng is not None else np.random.default_rng(0)
    pose = np.asarray(pose, dtype=float)
    torso, head, _ = glyph_masks(cam, pose, subject_width)
    if not (torso.any() or head.any()):
        raise ValueError("unlabelable scene")
    img = draw_subject(background(cam, rng), cam, pose, subject_width)
    return Scene(to_uint8(img).astype(np.float32), pose.copy())


def sample_pose(rng: np.random.Generator, y_bias: float = 0.7) -> np.ndarray:
    x = rng.uniform(*DEPTH_RANGE)
    positive = rng.uniform() < y_bias
    y = rng.uniform(0.0, LATERAL_RANGE[1]) if positive else rng.uniform(LATERAL_RANGE[0], 0.0)
    z = rng.uniform(*VERTICAL_RANGE)
    phi = rng.uniform(-math.pi, math.pi)
    return np.array([x, y, z, phi])


def sample_dataset(n: int, cam: CameraModel | None = None, seed: int = 0,
                   y_bias: float = 0.7) -> Dataset:
    """Draw ``n`` labelled scenes; each scene has its own stream keyed by (seed, index)."""
    if n <= 0:
        raise ValueError("dataset size must be positive")
    cam = cam or CameraModel()
    images = np.empty((n, cam.height, cam.width), dtype=np.float32)
    poses = np.empty((n, 4))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        while True:
            pose = sample_pose(rng, y_bias)
            try:
                scene = render_scene(pose, cam, rng)
            except ValueError:
                continue
            break
        images[i] = scene.image
        poses[i] = scene.subject_pose
    return Dataset(images, poses, seed, cam)


def background_dataset(n: int, cam: CameraModel | None = None, seed: int = 0) -> np.ndarray:
    """Subject-free frames, shape ``(n, H, W)``."""
    cam = cam or CameraModel()
    return np.stack([to_uint8(background(cam, np.random.default_rng([seed, i, 1]))).astype(np.float32)
                     for i in range(n)])


def split_dataset(c: Dataset, train_fraction: float = 0.9, seed: int = 0):
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(c))
    n_train = int(math.floor(train_fraction * len(c) + 0.5))
    return c.subset(np.sort(perm[:n_train])), c.subset(np.sort(perm[n_train:]))


def split_indices(n: int, train_fraction: float = 0.9, seed: int = 0):
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(train_fraction * n + 0.5))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def batches(s, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One epoch of index batches over ``s`` (a Dataset or a count)."""
    if size < 1:
        raise ValueError("batch size must be >= 1")
    n = s if isinstance(s, int) else len(s)
    perm = rng.permutation(n)
    return [perm[i:i + size] for i in range(0, n, size)]


# -- directory layout -----------------------------------------------------------

def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.images):
        write_pgm(root / "scenes" / f"{i:05d}.pgm", img)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "x", "y", "z", "phi"])
        for i, p in enumerate(ds.poses):
            w.writerow([i] + [f"{float(v):.17g}" for v in p])


def load_dataset(root, cam: CameraModel | None = None) -> Dataset:
    """Load ``scenes/NNNNN.pgm`` + ``labels.csv``; works for external imagery too."""
    root = Path(root)
    labels = root / "labels.csv"
    if not labels.is_file():
        raise FileNotFoundError(f"{labels} not found")
    rows = []
    with open(labels, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["index", "x", "y", "z", "phi"]:
            raise ValueError(f"{labels}: unexpected header {reader.fieldnames}")
        for row in reader:
            rows.append((int(row["index"]), [float(row[k]) for k in ("x", "y", "z", "phi")]))
    if not rows:
        raise ValueError(f"{labels}: no scenes")
    images = np.stack([read_pgm(root / "scenes" / f"{i:05d}.pgm") for i, _ in rows]).astype(np.float32)
    cam = cam or CameraModel(width=images.shape[2], height=images.shape[1],
                             cx=images.shape[2] / 2, cy=images.shape[1] / 2)
    return Dataset(images, np.array([p for _, p in rows]), None, cam)
