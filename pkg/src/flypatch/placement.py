"""Differentiable patch placement and the training-time augmentations.

Images and patches are grayscale grids in [0, 255].  Functions accept numpy
arrays or torch tensors; torch tensors keep their autograd graph.

Two placement routes are provided.  :func:`place` handles any invertible
affine or projective matrix through ``grid_sample``.  :func:`place_separable`
is the fast path used during optimization: with zero rotation the bilinear
warp factors into a row-interpolation and a column-interpolation matrix, so a
placement costs two small matrix products.
"""
from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import SCALE_MAX, SCALE_MIN, TRANSLATION_EPS, TransformParams

TRANSFORM_NOISE_STD = 0.1
IMAGE_NOISE_STD = 10.0
DISTORTION_SCALE = 0.2
PERSPECTIVE_PROB = 0.9


# -- transform bounds ---------------------------------------------------------

def clamp_transform(p: TransformParams) -> TransformParams:
    t_max = 1.0 - TRANSLATION_EPS
    return TransformParams(
        float(np.clip(p.s, SCALE_MIN, SCALE_MAX)),
        float(np.clip(p.tx, -t_max, t_max)),
        float(np.clip(p.ty, -t_max, t_max)),
        0.0,
    )


def clamp_params_(params: torch.Tensor) -> torch.Tensor:
    """In-place clamp of a ``(..., 3)`` tensor of (s, tx, ty) rows."""
    t_max = 1.0 - TRANSLATION_EPS
    with torch.no_grad():
        params[..., 0].clamp_(SCALE_MIN, SCALE_MAX)
        params[..., 1:].clamp_(-t_max, t_max)
    return params


def clamp_params(params: torch.Tensor) -> torch.Tensor:
    """Out-of-place clamp; gradient is zero where a bound is active."""
    t_max = 1.0 - TRANSLATION_EPS
    s = params[..., 0:1].clamp(SCALE_MIN, SCALE_MAX)
    t = params[..., 1:].clamp(-t_max, t_max)
    return torch.cat([s, t], dim=-1)


def random_params(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform draws within the clamp bounds, shape ``(*size, 3)``."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    t_max = 1.0 - TRANSLATION_EPS
    s = rng.uniform(SCALE_MIN, SCALE_MAX, size=shape + (1,))
    t = rng.uniform(-t_max, t_max, size=shape + (2,))
    return np.concatenate([s, t], axis=-1)


def perturb_transform(p: TransformParams, rng: np.random.Generator,
                      sigma: float = TRANSFORM_NOISE_STD) -> TransformParams:
    noise = rng.normal(0.0, sigma, size=3) if sigma > 0 else np.zeros(3)
    return clamp_transform(TransformParams(p.s + noise[0], p.tx + noise[1], p.ty + noise[2]))


# -- sampling -----------------------------------------------------------------

def bilinear_sample(patch, u: float, v: float):
    """Sample ``patch`` at normalized ``(u, v)`` (align-corners, clamp-to-edge).

    Works with numpy arrays and torch tensors; with a tensor the result is
    differentiable w.r.t. the four neighbouring pixels.
    """
    h, w = patch.shape[-2:]
    x = min(max((u + 1) / 2 * (w - 1), 0.0), w - 1)
    y = min(max((v + 1) / 2 * (h - 1), 0.0), h - 1)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fy) * ((1 - fx) * patch[y0, x0] + fx * patch[y0, x1])
            + fy * ((1 - fx) * patch[y1, x0] + fx * patch[y1, x1]))


def _as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x), dtype=dtype), True


def _base_grid(h, w, dtype, device=None):
    v = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    u = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    return torch.stack([uu, vv, torch.ones_like(uu)], dim=-1)  # (h, w, 3)


def _warp_grid(m_inv: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Source coordinates for every output pixel, ``(N, h, w, 2)``."""
    grid = _base_grid(h, w, m_inv.dtype, m_inv.device)
    src = torch.einsum("nij,hwj->nhwi", m_inv, grid)
    return src[..., :2] / src[..., 2:3]


def place(base, patch, m):
    """Composite ``patch`` into ``base`` under the matrix ``m`` (inverse warp).

    ``base`` is ``(H, W)`` or ``(N, H, W)``, ``patch`` is ``(h, w)`` or
    ``(N, h, w)`` and ``m`` is ``(3, 3)`` or ``(N, 3, 3)``.  Output pixels whose
    pre-image lies in the patch square take the bilinear patch sample; all
    others keep the base value.
    """
    base_t, b_np = _as_tensor(base)
    patch_t, _ = _as_tensor(patch, base_t.dtype)
    m_t, _ = _as_tensor(m, base_t.dtype)
    single = base_t.dim() == 2
    if single:
        base_t = base_t[None]
    if patch_t.dim() == 2:
        patch_t = patch_t[None].expand(base_t.shape[0], -1, -1)
    if m_t.dim() == 2:
        m_t = m_t[None].expand(base_t.shape[0], -1, -1)
    det = torch.linalg.det(m_t[:, :2, :2])
    if torch.any(det.abs() < 1e-18):
        raise ValueError("singular transform")
    m_inv = torch.linalg.inv(m_t)
    n, hh, ww = base_t.shape
    src = _warp_grid(m_inv, hh, ww)
    inside = (src.abs() <= 1.0).all(dim=-1)
    sampled = F.grid_sample(patch_t[:, None].to(base_t.dtype), src, mode="bilinear",
                            padding_mode="border", align_corners=True)[:, 0]
    out = torch.where(inside, sampled, base_t)
    if single:
        out = out[0]
    if b_np:
        return out.detach().numpy()
    return out


def _axis_weights(n_out: int, n_src: int, scale: torch.Tensor, shift: torch.Tensor):
    grid = torch.linspace(-1.0, 1.0, n_out, dtype=scale.dtype, device=scale.device)
    src = (grid[None, :] - shift[:, None]) / scale[:, None]
    inside = src.abs() <= 1.0
    idx = ((src + 1) / 2 * (n_src - 1)).clamp(0, n_src - 1)
    k = torch.arange(n_src, dtype=scale.dtype, device=scale.device)
    w = torch.relu(1 - (idx[..., None] - k).abs())
    return w, inside


def place_separable(base: torch.Tensor, patch: torch.Tensor, params: torch.Tensor,
                    coverage: torch.Tensor | None = None) -> torch.Tensor:
    """Batched placement for zero-rotation transforms.

    base: ``(N, H, W)``; patch: ``(N, h, w)``; params: ``(N, 3)`` rows of
    (s, tx, ty).  ``coverage`` (``(N, h, w)`` in [0, 1]) marks which patch
    pixels are opaque; it is used by the perspective augmentation, where the
    jittered patch no longer fills its square.
    """
    n, hh, ww = base.shape
    ph, pw = patch.shape[-2:]
    s, tx, ty = params[:, 0], params[:, 1], params[:, 2]
    wx, in_x = _axis_weights(ww, pw, s, tx)  # (N, W, w)
    wy, in_y = _axis_weights(hh, ph, s, ty)  # (N, H, h)
    mask = (in_y[:, :, None] & in_x[:, None, :]).to(base.dtype)
    if coverage is None:
        sampled = wy @ patch @ wx.transpose(1, 2)
        return base + mask * (sampled - base)
    sampled = wy @ (patch * coverage) @ wx.transpose(1, 2)
    alpha = wy @ coverage @ wx.transpose(1, 2)
    return base + mask * (sampled - alpha * base)


# -- perspective ----------------------------------------------------------------

def homography_from_points(src, dst) -> np.ndarray:
    """3x3 homography mapping four ``src`` points onto ``dst``."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


_CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])


def random_perspective_matrix(rng: np.random.Generator, distortion_scale: float = DISTORTION_SCALE,
                              p: float = PERSPECTIVE_PROB) -> np.ndarray:
    """Corner-jitter homography in normalized coordinates.

    With probability ``p`` every corner moves inward independently along each
    axis by ``U(0, distortion_scale)`` times the half-extent (which is 1 in
    normalized units); otherwise the identity is returned.  Two uniforms are
    always consumed first so the stream stays aligned regardless of outcome.
    """
    apply = rng.uniform() < p
    offsets = rng.uniform(0.0, 1.0, size=(4, 2)) * distortion_scale
    if not apply or distortion_scale == 0:
        return np.eye(3)
    dst = _CORNERS - np.sign(_CORNERS) * offsets
    return homography_from_points(_CORNERS, dst)


def warp_homography(img: torch.Tensor, h_inv: torch.Tensor, padding_mode="border") -> torch.Tensor:
    """Resample ``(N, H, W)`` images at ``h_inv`` applied to output coordinates."""
    n, hh, ww = img.shape
    src = _warp_grid(h_inv, hh, ww)
    return F.grid_sample(img[:, None], src, mode="bilinear", padding_mode=padding_mode,
                         align_corners=True)[:, 0]


def perspective_patch(patch: torch.Tensor, h_inv: torch.Tensor):
    """Jitter ``(N, h, w)`` patches in their own frame; returns (patch, coverage)."""
    warped = warp_homography(patch, h_inv)
    ones = torch.ones_like(patch)
    coverage = warp_homography(ones, h_inv, padding_mode="zeros")
    return warped, coverage


def random_perspective(img, rng: np.random.Generator, distortion_scale: float = DISTORTION_SCALE,
                       p: float = PERSPECTIVE_PROB):
    """Whole-image perspective jitter with edge-clamp fill."""
    img_t, was_np = _as_tensor(img)
    h = random_perspective_matrix(rng, distortion_scale, p)
    if np.array_equal(h, np.eye(3)):
        return img.copy() if was_np else img.clone()
    h_inv = torch.as_tensor(np.linalg.inv(h), dtype=img_t.dtype)
    single = img_t.dim() == 2
    batch = img_t[None] if single else img_t
    out = warp_homography(batch, h_inv[None].expand(batch.shape[0], -1, -1))
    out = out[0] if single else out
    return out.detach().numpy() if was_np else out


def add_image_noise(img, rng: np.random.Generator, sigma: float = IMAGE_NOISE_STD):
    """Additive per-pixel Gaussian noise; no clamping."""
    if sigma == 0:
        return img.copy() if isinstance(img, np.ndarray) else img.clone()
    noise = rng.normal(0.0, sigma, size=tuple(img.shape))
    if isinstance(img, torch.Tensor):
        return img + torch.as_tensor(noise, dtype=img.dtype)
    return img + noise
