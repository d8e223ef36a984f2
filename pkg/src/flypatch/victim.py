"""Surrogate pose-regression victim and its int8-emulated twin.

The network maps a 96x160 grayscale frame to ``(x, y, z, phi)``: three stride-2
convolutions with ReLU, global average pooling and a two-layer head.  The
first convolution also sees two fixed coordinate channels (u and v in
[-1, 1]) so pooled features keep track of *where* the subject is; their
contribution is an input-independent bias map, computed once per call.
"""
from __future__ import annotations

import copy
import logging
import math
import struct
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

MAGIC = b"PFVM"
FORMAT_VERSION = 1
INT8_MAX = 127


class SurrogateUnderTrained(RuntimeError):
    pass


class ModelFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class VictimModel(nn.Module):
    def __init__(self, channels=(8, 16, 48), hidden=64, height=96, width=160,
                 mean=128.0, std=64.0):
        super().__init__()
        c1, c2, c3 = channels
        self.height, self.width = height, width
        self.conv1 = nn.Conv2d(3, c1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.fc1 = nn.Linear(c3, hidden)
        self.fc2 = nn.Linear(hidden, 4)
        self.register_buffer("norm", torch.tensor([mean, std], dtype=torch.float64))

    @property
    def channels(self):
        return (self.conv1.out_channels, self.conv2.out_channels, self.conv3.out_channels)

    def _coords(self, dtype, device):
        v = torch.linspace(-1.0, 1.0, self.height, dtype=dtype, device=device)
        u = torch.linspace(-1.0, 1.0, self.width, dtype=dtype, device=device)
        vv, uu = torch.meshgrid(v, u, indexing="ij")
        return torch.stack([uu, vv])[None]

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if img.dim() == 2:
            return self.forward(img[None])[0]
        if img.dim() == 3:
            img = img[:, None]
        if tuple(img.shape[-2:]) != (self.height, self.width):
            raise ValueError(f"expected {self.height}x{self.width} input, got "
                             f"{tuple(img.shape[-2:])}")
        w = self.conv1.weight
        x = (img - self.norm[0].to(w.dtype)) / self.norm[1].to(w.dtype)
        pos = F.conv2d(self._coords(w.dtype, w.device), w[:, 1:], self.conv1.bias,
                       stride=2, padding=1)
        h = F.relu(F.conv2d(x, w[:, :1], None, stride=2, padding=1) + pos)
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))
        h = h.mean(dim=(2, 3))
        return self.fc2(F.relu(self.fc1(h)))


class QuantizedVictimModel(VictimModel):
    """Same architecture with every parameter tensor snapped to an int8 grid."""

    scales: dict


def forward(model: VictimModel, img) -> torch.Tensor:
    """Pose prediction for one image ``(H, W)`` or a batch ``(N, H, W)``."""
    if not isinstance(img, torch.Tensor):
        img = torch.as_tensor(np.asarray(img), dtype=model.conv1.weight.dtype)
    return model(img)


def _round_half_away(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def quantize_tensor(w: torch.Tensor):
    """Symmetric per-tensor int8 snap; returns (dequantized values, scale)."""
    peak = float(w.abs().max()) if w.numel() else 0.0
    if peak == 0.0:
        return w.clone(), 1.0
    scale = peak / INT8_MAX
    q = _round_half_away(w / scale).clamp(-INT8_MAX, INT8_MAX)
    return q * scale, scale


def quantize_model(model: VictimModel) -> QuantizedVictimModel:
    qm = QuantizedVictimModel(model.channels, model.fc1.out_features, model.height, model.width)
    qm.to(model.conv1.weight.dtype)
    qm.load_state_dict(model.state_dict())
    qm.norm = model.norm.clone()
    qm.scales = {}
    with torch.no_grad():
        for name, p in qm.named_parameters():
            snapped, scale = quantize_tensor(p.data)
            p.copy_(snapped)
            qm.scales[name] = scale
    qm.eval()
    return qm


def working_copy(model: VictimModel, dtype=torch.float32) -> VictimModel:
    """Frozen copy in ``dtype`` for attack-time use."""
    m = copy.deepcopy(model).to(dtype)
    m.norm = model.norm.clone()
    m.eval()
    for p in m.parameters():
        p.requires_grad_(False)
    return m


# -- training -----------------------------------------------------------------

def position_mse(model: VictimModel, images, poses, batch_size=256) -> float:
    """Mean squared (x, y, z) error over a set of labelled images."""
    dtype = model.conv1.weight.dtype
    images = torch.as_tensor(np.asarray(images), dtype=dtype)
    poses = torch.as_tensor(np.asarray(poses), dtype=dtype)
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            pred = model(images[i:i + batch_size])
            total += float(((pred[:, :3] - poses[i:i + batch_size, :3]) ** 2).sum())
    return total / (3 * len(images))


def _pose_loss(pred, target, yaw_weight):
    pos = ((pred[:, :3] - target[:, :3]) ** 2).mean()
    dyaw = torch.atan2(torch.sin(pred[:, 3] - target[:, 3]), torch.cos(pred[:, 3] - target[:, 3]))
    return pos + yaw_weight * (dyaw ** 2).mean()


def train_surrogate(train, seed: int = 42, epochs: int = 30, val=None, batch_size: int = 32,
                    lr: float = 1e-3, mse_gate: float = 0.05, yaw_weight: float = 0.05,
                    channels=(8, 16, 48), hidden: int = 64) -> VictimModel:
    """Fit a surrogate victim by Adam on the pose MSE.

    ``train`` and ``val`` are :class:`flypatch.data.Dataset` instances; without
    ``val`` the last 10% of ``train`` is held out.  Raises
    :class:`SurrogateUnderTrained` if the held-out position MSE exceeds
    ``mse_gate``.  The returned model holds float64 parameters.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    images, poses = np.asarray(train.images), np.asarray(train.poses)
    if val is None:
        n_val = max(1, len(images) // 10)
        if len(images) - n_val < 1:
            raise ValueError("training set too small to hold out validation scenes")
        val_images, val_poses = images[-n_val:], poses[-n_val:]
        images, poses = images[:-n_val], poses[:-n_val]
    else:
        val_images, val_poses = np.asarray(val.images), np.asarray(val.poses)

    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = VictimModel(channels, hidden, images.shape[1], images.shape[2])
    rng = np.random.default_rng(seed)
    x_all = torch.as_tensor(images, dtype=torch.float32)
    y_all = torch.as_tensor(poses, dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for epoch in range(epochs):
        perm = rng.permutation(len(x_all))
        running = 0.0
        for i in range(0, len(perm), batch_size):
            idx = torch.as_tensor(perm[i:i + batch_size])
            loss = _pose_loss(model(x_all[idx]), y_all[idx], yaw_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            running += loss.item() * len(idx)
        logger.info("epoch %d train loss %.4f", epoch, running / len(perm))

    model = model.double()
    model.eval()
    mse = position_mse(model, val_images, val_poses)
    model.val_mse = mse
    logger.info("validation position MSE %.4f", mse)
    if not math.isfinite(mse) or mse > mse_gate:
        raise SurrogateUnderTrained(
            f"surrogate under-trained: validation MSE {mse:.4f} > {mse_gate}")
    return model


# -- persistence --------------------------------------------------------------

def _tensors(model: VictimModel):
    return [p.detach() for p in model.parameters()] + [model.norm]


def save_model(model: VictimModel, path) -> None:
    tensors = _tensors(model)
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(tensors))
    for t in tensors:
        arr = t.cpu().to(torch.float64).numpy()
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(out))


def _read(buf: bytes, offset: int, fmt: str, what: str):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise ModelFormatError(f"truncated file while reading {what}", offset)
    return struct.unpack_from(fmt, buf, offset), offset + size


def load_model(path) -> VictimModel:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ModelFormatError("bad magic bytes", 0)
    (version, count), off = _read(buf, 4, "<II", "header")
    if version != FORMAT_VERSION:
        raise ModelFormatError("unsupported model version", 4)
    if count != 11:
        raise ModelFormatError(f"expected 11 tensors, found {count}", 8)
    arrays = []
    for i in range(count):
        (ndim,), off = _read(buf, off, "<I", f"tensor {i} rank")
        if ndim > 4:
            raise ModelFormatError(f"tensor {i} has implausible rank {ndim}", off - 4)
        dims, off = _read(buf, off, f"<{ndim}I", f"tensor {i} shape")
        n = int(np.prod(dims)) if ndim else 1
        if off + 8 * n > len(buf):
            raise ModelFormatError(f"truncated file while reading tensor {i} values", off)
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims))
        off += 8 * n
    if off != len(buf):
        raise ModelFormatError("trailing bytes after last tensor", off)

    w1, w2, w3, f1 = arrays[0], arrays[2], arrays[4], arrays[6]
    try:
        model = VictimModel((w1.shape[0], w2.shape[0], w3.shape[0]), f1.shape[0])
        model.double()
        with torch.no_grad():
            for p, a in zip(model.parameters(), arrays[:10]):
                if tuple(p.shape) != a.shape:
                    raise ValueError(f"shape {a.shape} does not match {tuple(p.shape)}")
                p.copy_(torch.from_numpy(a.copy()))
    except (ValueError, IndexError) as exc:
        raise ModelFormatError(f"inconsistent tensor shapes: {exc}", 12) from exc
    model.norm = torch.from_numpy(arrays[10].copy())
    model.eval()
    return model
