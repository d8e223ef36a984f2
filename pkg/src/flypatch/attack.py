"""Multi-patch, multi-target adversarial patch optimization.

Every patch ``m`` has one placement ``(s, tx, ty)`` per target ``k``.  The
per-pair loss is the distance between the target position and the victim's
predicted position with patch ``m`` placed at ``T[m, k]``; patches compete for
each target through a softmin-weighted expectation, and an ``(M, K)`` boolean
assignment matrix switches pairs on and off.

Four strategies share this machinery:

* ``fixed``  - random placements, frozen; only patch pixels are trained.
* ``joint``  - patches and placements trained together by gradient descent.
* ``split``  - per iteration: a patch-only epoch, a random-restart search over
  placements, then a sampled re-assignment of patches to targets.
* ``hybrid`` - ``joint`` warm start followed by the placement search and
  re-assignment of ``split`` with the patches frozen.

An *iteration* is one epoch over the training images in batches of 32, with
one Adam update per batch.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import batches
from .geometry import TransformParams
from .pgm import read_pgm, write_pgm
from .placement import (DISTORTION_SCALE, IMAGE_NOISE_STD, PERSPECTIVE_PROB, TRANSFORM_NOISE_STD,
                        clamp_params, clamp_params_, perspective_patch, place_separable,
                        random_params, random_perspective_matrix)
from .victim import VictimModel, working_copy

logger = logging.getLogger(__name__)

METHODS = ("fixed", "joint", "split", "hybrid")


class DivergenceError(RuntimeError):
    pass


# -- containers -----------------------------------------------------------------

@dataclass
class PatchSet:
    patches: np.ndarray     # (M, h, w) grey levels
    params: np.ndarray      # (M, K, 3) rows of (s, tx, ty)
    assignment: np.ndarray  # (M, K) bool

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]

    @property
    def num_targets(self) -> int:
        return self.params.shape[1]

    def transform(self, m: int, k: int) -> TransformParams:
        s, tx, ty = self.params[m, k]
        return TransformParams(float(s), float(tx), float(ty))

    def active_pairs(self):
        return [(int(m), int(k)) for m, k in zip(*np.nonzero(self.assignment))]


@dataclass
class AttackSettings:
    batch_size: int = 32
    lr: float = 1e-3
    augment: bool = True
    transform_noise: float = TRANSFORM_NOISE_STD
    image_noise: float = IMAGE_NOISE_STD
    distortion_scale: float = DISTORTION_SCALE
    perspective_prob: float = PERSPECTIVE_PROB
    patch_size: tuple = (64, 64)
    max_images_per_pass: int = 64
    dtype: torch.dtype = torch.float32
    eval_every: int = 1


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, project=None):
    """One Adam update; returns new tensors and advances ``state`` in place.

    ``project`` is an optional sequence of callables (or None entries) applied
    to the matching updated tensor, used for the box constraints.
    """
    for g in grads:
        if not torch.isfinite(g).all():
            raise DivergenceError("diverged")
    if not state.m:
        state.m = [torch.zeros_like(p) for p in params]
        state.v = [torch.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1 - state.beta1 ** state.step
    bc2 = 1 - state.beta2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1 - state.beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        new = (p.detach() - state.lr * m_hat / (v_hat.sqrt() + state.eps))
        if project is not None and project[i] is not None:
            new = project[i](new)
        out.append(new)
    return out


def clamp_patch_(p: torch.Tensor) -> torch.Tensor:
    return p.clamp_(0.0, 255.0)


def clamp_unit_(p: torch.Tensor) -> torch.Tensor:
    return p.clamp_(0.0, 1.0)


# -- losses ---------------------------------------------------------------------

def softmin_expectation(losses):
    """``sum_m softmin(L)_m * L_m``, shifted by ``min(L)`` for stability."""
    if isinstance(losses, torch.Tensor):
        if losses.numel() == 0:
            raise ValueError("empty loss vector")
        w = torch.softmax(-(losses - losses.min().detach()), dim=-1)
        return (w * losses).sum(-1)
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ValueError("empty loss vector")
    w = np.exp(-(losses - losses.min()))
    return float((w * losses).sum() / w.sum())


def softmin_probabilities(costs) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    w = np.exp(-(costs - costs.min()))
    return w / w.sum()


def masked_expectation(L: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
    """Softmin expectation over the patch axis of ``L`` (..., M, K).

    Inactive entries are ignored; a target with no active patch contributes 0.
    """
    neg = torch.where(active, -L, torch.full_like(L, -math.inf))
    any_active = active.any(dim=-2, keepdim=True)
    neg = torch.where(any_active, neg, torch.zeros_like(neg))
    w = torch.softmax(neg - neg.max(dim=-2, keepdim=True).values.detach(), dim=-2)
    contrib = torch.where(active, w * L, torch.zeros_like(L))
    return contrib.sum(dim=-2)


class Augmenter:
    """Draws the transform jitter, patch perspective and image noise."""

    def __init__(self, rng: np.random.Generator, settings: AttackSettings):
        self.rng = rng
        self.settings = settings
        # bulk pixel noise comes from torch's faster sampler, seeded off ``rng``
        self.torch_gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))

    def jitter(self, n: int) -> np.ndarray:
        return self.rng.normal(0.0, self.settings.transform_noise, size=(n, 3)) \
            if self.settings.transform_noise > 0 else np.zeros((n, 3))

    def perspective(self, n: int) -> np.ndarray:
        st = self.settings
        return np.stack([np.linalg.inv(random_perspective_matrix(self.rng, st.distortion_scale,
                                                                 st.perspective_prob))
                         for _ in range(n)])

    def noise(self, shape, dtype=torch.float32) -> torch.Tensor:
        if self.settings.image_noise <= 0:
            return torch.zeros(shape, dtype=dtype)
        return torch.randn(shape, generator=self.torch_gen, dtype=dtype) * self.settings.image_noise


def column_losses(model: VictimModel, images: torch.Tensor, patches: torch.Tensor,
                  params: torch.Tensor, targets: torch.Tensor, aug: Augmenter | None = None):
    """Per-image, per-column placement losses.

    images: ``(B, H, W)``; patches ``(P, h, w)``, params ``(P, 3)`` and targets
    ``(P, 3)`` describe P placement columns.  Returns ``(B, P)``.
    """
    b, hh, ww = images.shape
    p = patches.shape[0]
    dtype = images.dtype
    base = images[:, None].expand(b, p, hh, ww).reshape(b * p, hh, ww)
    patch = patches[None].expand(b, p, *patches.shape[1:]).reshape(b * p, *patches.shape[1:])
    prm = params[None].expand(b, p, 3).reshape(b * p, 3)
    coverage = None
    if aug is not None:
        prm = clamp_params(prm + torch.as_tensor(aug.jitter(b * p), dtype=dtype))
        h_inv = torch.as_tensor(aug.perspective(b * p), dtype=dtype)
        patch, coverage = perspective_patch(patch, h_inv)
    placed = place_separable(base, patch, prm, coverage)
    if aug is not None:
        placed = placed + aug.noise(placed.shape, dtype)
    pred = model(placed)[:, :3].reshape(b, p, 3)
    return torch.linalg.vector_norm(pred - targets[None], dim=-1)


def per_target_loss(model, img, patch, t: TransformParams, target, rng=None,
                    settings: AttackSettings | None = None):
    """Single-pair loss for one image; augmented when ``rng`` is given."""
    settings = settings or AttackSettings(dtype=model.conv1.weight.dtype)
    dtype = model.conv1.weight.dtype
    img = torch.as_tensor(img, dtype=dtype)
    patch = torch.as_tensor(patch, dtype=dtype)
    prm = torch.tensor([[t.s, t.tx, t.ty]], dtype=dtype)
    tgt = torch.as_tensor(np.asarray(target, dtype=float), dtype=dtype)[None]
    aug = Augmenter(rng, settings) if rng is not None and settings.augment else None
    return column_losses(model, img[None], patch[None], prm, tgt, aug)[0, 0]


def _pair_tensors(patches, params, targets, pairs):
    ms = torch.as_tensor([m for m, _ in pairs])
    ks = torch.as_tensor([k for _, k in pairs])
    return patches[ms], params[ms, ks], targets[ks], ms, ks


def image_objectives(model, images, patches, params, assignment, targets, aug=None):
    """Per-image ``sum_k E(L_k)`` over active pairs, shape ``(B,)``."""
    m_count, k_count = assignment.shape
    pairs = [(int(m), int(k)) for m, k in zip(*np.nonzero(np.asarray(assignment)))]
    if not pairs:
        return torch.zeros(images.shape[0], dtype=images.dtype)
    pt, pp, tg, ms, ks = _pair_tensors(patches, params, targets, pairs)
    L_cols = column_losses(model, images, pt, pp, tg, aug)
    L = torch.zeros(images.shape[0], m_count, k_count, dtype=images.dtype)
    L = L.index_put((torch.arange(images.shape[0])[:, None], ms[None], ks[None]), L_cols)
    active = torch.zeros(m_count, k_count, dtype=torch.bool)
    active[ms, ks] = True
    return masked_expectation(L, active.expand_as(L)).sum(-1)


def total_loss(model, images, patchset: PatchSet, assignment, targets, rng=None,
               settings: AttackSettings | None = None) -> torch.Tensor:
    """Mean over images of the summed per-target softmin expectations."""
    dtype = model.conv1.weight.dtype
    settings = settings or AttackSettings(dtype=dtype)
    images = torch.as_tensor(np.asarray(images), dtype=dtype)
    patches = torch.as_tensor(patchset.patches, dtype=dtype)
    params = torch.as_tensor(patchset.params, dtype=dtype)
    tg = torch.as_tensor(np.asarray(targets, dtype=float), dtype=dtype)
    aug = Augmenter(rng, settings) if rng is not None and settings.augment else None
    return image_objectives(model, images, patches, params, assignment, tg, aug).mean()


# -- evaluation -----------------------------------------------------------------

def _chunks(n_images: int, columns: int, limit: int):
    step = max(1, limit // max(1, columns))
    return [slice(i, min(i + step, n_images)) for i in range(0, n_images, step)]


def cost_matrix(model, images, patches, params, targets, settings: AttackSettings) -> np.ndarray:
    """Mean un-augmented loss of every (m, k) pair over ``images``."""
    m_count, k_count = params.shape[:2]
    pairs = [(m, k) for m in range(m_count) for k in range(k_count)]
    pt, pp, tg, _, _ = _pair_tensors(patches, params, targets, pairs)
    total = torch.zeros(len(pairs), dtype=torch.float64)
    with torch.no_grad():
        for sl in _chunks(len(images), len(pairs), settings.max_images_per_pass):
            total += column_losses(model, images[sl], pt, pp, tg).sum(0).double()
    return (total / len(images)).numpy().reshape(m_count, k_count)


def argmin_assignment(cost: np.ndarray) -> np.ndarray:
    a = np.zeros(cost.shape, dtype=bool)
    a[np.argmin(cost, axis=0), np.arange(cost.shape[1])] = True
    return a


def sample_assignment(cost: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One patch per target, drawn from the softmin of that target's column."""
    m_count, k_count = cost.shape
    a = np.zeros((m_count, k_count), dtype=bool)
    for k in range(k_count):
        a[rng.choice(m_count, p=softmin_probabilities(cost[:, k])), k] = True
    return a


def evaluate(model, images, patchset: PatchSet, targets, assignment=None,
             settings: AttackSettings | None = None) -> dict:
    """Un-augmented test metrics.

    ``loss`` is the mean over images and targets of the softmin expectation
    (so it equals the mean of ``per_target``); ``total`` is the per-image sum
    over targets averaged over images.
    """
    dtype = model.conv1.weight.dtype
    settings = settings or AttackSettings(dtype=dtype)
    a = np.asarray(patchset.assignment if assignment is None else assignment, dtype=bool)
    imgs = torch.as_tensor(np.asarray(images), dtype=dtype)
    patches = torch.as_tensor(patchset.patches, dtype=dtype)
    params = torch.as_tensor(patchset.params, dtype=dtype)
    tg = torch.as_tensor(np.asarray(targets, dtype=float), dtype=dtype)
    cost = cost_matrix(model, imgs, patches, params, tg, settings)
    # with every pair's mean loss known, per-target expectations need per-image
    # losses, so recompute them over active pairs only
    per_image = []
    with torch.no_grad():
        pairs = [(int(m), int(k)) for m, k in zip(*np.nonzero(a))]
        pt, pp, tgc, ms, ks = _pair_tensors(patches, params, tg, pairs)
        for sl in _chunks(len(imgs), len(pairs), settings.max_images_per_pass):
            Lc = column_losses(model, imgs[sl], pt, pp, tgc)
            L = torch.zeros(Lc.shape[0], *a.shape, dtype=dtype)
            L = L.index_put((torch.arange(Lc.shape[0])[:, None], ms[None], ks[None]), Lc)
            act = torch.as_tensor(a).expand_as(L)
            per_image.append(masked_expectation(L, act).double())
    per_target = torch.cat(per_image).mean(0).numpy()
    return {
        "loss": float(per_target.mean()),
        "total": float(per_target.sum()),
        "per_target": per_target.tolist(),
        "cost": cost.tolist(),
        "assignment": np.argmin(np.where(a, cost, np.inf), axis=0).tolist(),
    }


# -- optimization ---------------------------------------------------------------

class _Run:
    """Shared state for one optimization run."""

    def __init__(self, model, train_images, targets, num_patches, seed, settings, test_images=None,
                 init_patch=None, callback=None):
        self.settings = settings
        self.dtype = settings.dtype
        self.model = working_copy(model, self.dtype)
        self.images = torch.as_tensor(np.asarray(train_images), dtype=self.dtype)
        self.test_images = None if test_images is None else \
            torch.as_tensor(np.asarray(test_images), dtype=self.dtype)
        self.targets = torch.as_tensor(np.asarray(targets, dtype=float), dtype=self.dtype)
        if self.targets.dim() != 2 or self.targets.shape[1] != 3 or len(self.targets) < 1:
            raise ValueError("targets must be a (K, 3) array with K >= 1")
        self.M, self.K = num_patches, len(self.targets)
        ss = np.random.SeedSequence(seed)
        init_ss, batch_ss, aug_ss, restart_ss, assign_ss = ss.spawn(5)
        init_rng = np.random.default_rng(init_ss)
        self.batch_rng = np.random.default_rng(batch_ss)
        self.aug = Augmenter(np.random.default_rng(aug_ss), settings) if settings.augment else None
        self.restart_rng = np.random.default_rng(restart_ss)
        self.assign_rng = np.random.default_rng(assign_ss)
        h, w = settings.patch_size
        if init_patch is None:
            patches = init_rng.uniform(0.0, 255.0, size=(self.M, h, w))
        else:
            src = torch.as_tensor(np.asarray(init_patch, dtype=float))[None, None]
            one = F.interpolate(src, size=(h, w), mode="bilinear", align_corners=True)[0, 0].numpy()
            patches = np.repeat(one[None], self.M, axis=0)
            init_rng.uniform(size=(self.M, h, w))  # keep later draws seed-aligned
        # Adam runs on intensities scaled to [0, 1]; lr is defined on that scale
        self.unit = torch.as_tensor(patches / 255.0, dtype=self.dtype)
        self.params = torch.as_tensor(random_params(init_rng, (self.M, self.K)), dtype=self.dtype)
        self.assignment = np.ones((self.M, self.K), dtype=bool)
        self.patch_adam = AdamState(lr=settings.lr)
        self.joint_adam = AdamState(lr=settings.lr)
        self.history: list[dict] = []
        self.callback = callback

    # objective + gradient over one batch, accumulated over image chunks
    def _batch_grad(self, idx, wrt: str):
        imgs = self.images[torch.as_tensor(idx)]
        unit = self.unit.clone().requires_grad_(wrt in ("patches", "both"))
        params = self.params.clone().requires_grad_(wrt in ("params", "both"))
        leaves = [t for t in (unit, params) if t.requires_grad]
        grads = [torch.zeros_like(t) for t in leaves]
        n_cols = int(self.assignment.sum())
        total = 0.0
        for sl in _chunks(len(imgs), n_cols, self.settings.max_images_per_pass):
            obj = image_objectives(self.model, imgs[sl], unit * 255.0, params, self.assignment,
                                   self.targets, self.aug).sum() / len(imgs)
            for g, d in zip(grads, torch.autograd.grad(obj, leaves)):
                g += d
            total += obj.item()
        return total, grads

    def train_epoch(self, wrt: str) -> float:
        running = 0.0
        for idx in batches(len(self.images), self.settings.batch_size, self.batch_rng):
            loss, grads = self._batch_grad(idx, wrt)
            running += loss * len(idx)
            if wrt == "patches":
                (self.unit,) = adam_step([self.unit], grads, self.patch_adam, [clamp_unit_])
            elif wrt == "both":
                self.unit, self.params = adam_step([self.unit, self.params], grads,
                                                   self.joint_adam, [clamp_unit_, clamp_params_])
            else:
                raise ValueError(wrt)
        return running / len(self.images)

    def restart_search(self, R: int) -> float:
        """Placement search for every active pair (patches frozen).

        Candidate 0 is the incumbent, the others are uniform draws; each is
        trained for one epoch by its own Adam and the candidate with the lowest
        epoch-mean loss replaces the incumbent.
        """
        pairs = self.pairs()
        n = len(pairs)
        cand = np.repeat(self.params[[m for m, _ in pairs], [k for _, k in pairs]].numpy()[:, None],
                         R, axis=1)
        if R > 1:
            cand[:, 1:] = random_params(self.restart_rng, (n, R - 1))
        cand = torch.as_tensor(cand.reshape(n * R, 3), dtype=self.dtype)
        patch_cols = self.patches[[m for m, _ in pairs for _ in range(R)]]
        target_cols = self.targets[[k for _, k in pairs for _ in range(R)]]
        state = AdamState(lr=self.settings.lr)
        epoch_loss = torch.zeros(n * R, dtype=torch.float64)
        for idx in batches(len(self.images), self.settings.batch_size, self.batch_rng):
            imgs = self.images[torch.as_tensor(idx)]
            leaf = cand.clone().requires_grad_(True)
            grad = torch.zeros_like(leaf)
            for sl in _chunks(len(imgs), n * R, self.settings.max_images_per_pass):
                L = column_losses(self.model, imgs[sl], patch_cols, leaf, target_cols, self.aug)
                epoch_loss += L.detach().sum(0).double()
                (d,) = torch.autograd.grad(L.sum() / len(imgs), [leaf])
                grad += d
            (cand,) = adam_step([cand], [grad], state, [clamp_params_])
        epoch_loss = (epoch_loss / len(self.images)).reshape(n, R)
        best = epoch_loss.argmin(dim=1)
        cand = cand.reshape(n, R, 3)
        for i, (m, k) in enumerate(pairs):
            self.params[m, k] = cand[i, best[i]]
        # summed over pairs: with a one-hot assignment this is the training objective
        return float(epoch_loss[torch.arange(n), best].sum())

    def reassign(self) -> np.ndarray:
        cost = self.cost(self.test_images if self.test_images is not None else self.images)
        self.assignment = sample_assignment(cost, self.assign_rng)
        return cost

    @property
    def patches(self) -> torch.Tensor:
        return self.unit * 255.0

    def pairs(self):
        return [(int(m), int(k)) for m, k in zip(*np.nonzero(self.assignment))]

    def cost(self, images) -> np.ndarray:
        return cost_matrix(self.model, images, self.patches, self.params, self.targets, self.settings)

    def patchset(self, assignment=None) -> PatchSet:
        a = self.assignment if assignment is None else assignment
        return PatchSet(self.patches.double().numpy().copy(), self.params.double().numpy().copy(),
                        np.array(a, dtype=bool))

    def record(self, it: int, phase: str, loss_train: float, force_eval: bool = False):
        rec = {"iter": it, "phase": phase, "loss_train": loss_train, "loss_test": None,
               "per_target": None, "assignment": None}
        if self.test_images is not None and (force_eval or it % self.settings.eval_every == 0):
            ev = evaluate(self.model, self.test_images, self.patchset(), self.targets.numpy(),
                          self.assignment, self.settings)
            rec.update(loss_test=ev["loss"], per_target=ev["per_target"],
                       assignment=ev["assignment"])
        self.history.append(rec)
        logger.info("iter %d [%s] train %.4f test %s", it, phase, loss_train, rec["loss_test"])
        if self.callback is not None:
            self.callback(rec)
        return rec

    def current_assignment(self) -> np.ndarray:
        if (self.assignment.sum(axis=0) == 1).all():
            return self.assignment
        held_out = self.test_images if self.test_images is not None else self.images
        return argmin_assignment(self.cost(held_out))

    def finish(self, one_hot: np.ndarray | None = None):
        if one_hot is None:
            one_hot = self.current_assignment()
        return self.patchset(one_hot), {"history": self.history}


def optimize_fixed(model, train_images, targets, M: int, N: int, seed: int, test_images=None,
                   settings: AttackSettings | None = None, init_patch=None, callback=None):
    """Patch-only training on random, frozen placements (all pairs active)."""
    if N < 1:
        raise ValueError("N must be >= 1")
    run = _Run(model, train_images, targets, M, seed, settings or AttackSettings(), test_images,
               init_patch, callback)
    for it in range(1, N + 1):
        loss = run.train_epoch("patches")
        run.record(it, "fixed", loss, force_eval=it == N)
    return run.finish()


def optimize_joint(model, train_images, targets, M: int, N: int, seed: int, test_images=None,
                   settings: AttackSettings | None = None, init_patch=None, callback=None):
    """Simultaneous Adam on patches and placements (all pairs active).

    The returned assignment picks, for every target, the patch with the lowest
    mean test loss (training loss when no test images are given).
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    run = _Run(model, train_images, targets, M, seed, settings or AttackSettings(), test_images,
               init_patch, callback)
    for it in range(1, N + 1):
        loss = run.train_epoch("both")
        run.record(it, "joint", loss, force_eval=it == N)
    return run.finish()


def optimize_split(model, train_images, test_images, targets, M: int, N: int, R: int, seed: int,
                   settings: AttackSettings | None = None, init_patch=None, callback=None):
    if N < 1 or R < 1:
        raise ValueError("N and R must be >= 1")
    run = _Run(model, train_images, targets, M, seed, settings or AttackSettings(), test_images,
               init_patch, callback)
    for it in range(1, N + 1):
        loss = run.train_epoch("patches")
        run.restart_search(R)
        run.reassign()
        run.record(it, "split", loss, force_eval=it == N)
    return run.finish(run.assignment)


def optimize_hybrid(model, train_images, test_images, targets, M: int, N_joint: int, N_ft: int,
                    R: int, seed: int, settings: AttackSettings | None = None, init_patch=None,
                    callback=None):
    if N_joint < 0 or N_ft < 0 or N_joint + N_ft < 1 or R < 1:
        raise ValueError("need N_joint + N_ft >= 1 and R >= 1")
    run = _Run(model, train_images, targets, M, seed, settings or AttackSettings(), test_images,
               init_patch, callback)
    for it in range(1, N_joint + 1):
        loss = run.train_epoch("both")
        run.record(it, "joint", loss, force_eval=(it == N_joint and N_ft == 0))
    for it in range(N_joint + 1, N_joint + N_ft + 1):
        loss = run.restart_search(R)
        run.reassign()
        run.record(it, "finetune", loss, force_eval=it == N_joint + N_ft)
    return run.finish(run.assignment if N_ft else None)


def optimize(method: str, model, train_images, test_images, targets, M: int, N: int, seed: int,
             R: int | None = None, n_joint: int | None = None, settings=None, init_patch=None,
             callback=None):
    """Dispatch to one of the four strategies by name."""
    if method == "fixed":
        return optimize_fixed(model, train_images, targets, M, N, seed, test_images, settings,
                              init_patch, callback)
    if method == "joint":
        return optimize_joint(model, train_images, targets, M, N, seed, test_images, settings,
                              init_patch, callback)
    if method in ("split", "hybrid") and R is None:
        raise ValueError(f"method {method!r} requires R")
    if method == "split":
        return optimize_split(model, train_images, test_images, targets, M, N, R, seed, settings,
                              init_patch, callback)
    if method == "hybrid":
        nj = N // 2 if n_joint is None else n_joint
        return optimize_hybrid(model, train_images, test_images, targets, M, nj, N - nj, R, seed,
                               settings, init_patch, callback)
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


# -- artifacts ------------------------------------------------------------------

def save_patchset(ps: PatchSet, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for m, patch in enumerate(ps.patches):
        write_pgm(out / f"patch_{m}.pgm", patch)
    lines = ["m,k,s,tx,ty,active"]
    for m in range(ps.num_patches):
        for k in range(ps.num_targets):
            s, tx, ty = ps.params[m, k]
            lines.append(f"{m},{k},{s:.17g},{tx:.17g},{ty:.17g},{int(ps.assignment[m, k])}")
    (out / "transforms.csv").write_text("\n".join(lines) + "\n")


def load_patchset(in_dir) -> PatchSet:
    src = Path(in_dir)
    rows = (src / "transforms.csv").read_text().strip().splitlines()
    if rows[0] != "m,k,s,tx,ty,active":
        raise ValueError(f"{src / 'transforms.csv'}: unexpected header")
    recs = [r.split(",") for r in rows[1:]]
    M = 1 + max(int(r[0]) for r in recs)
    K = 1 + max(int(r[1]) for r in recs)
    params = np.zeros((M, K, 3))
    active = np.zeros((M, K), dtype=bool)
    for r in recs:
        m, k = int(r[0]), int(r[1])
        params[m, k] = [float(r[2]), float(r[3]), float(r[4])]
        active[m, k] = r[5] == "1"
    patches = np.stack([read_pgm(src / f"patch_{m}.pgm") for m in range(M)])
    return PatchSet(patches, params, active)


def write_metrics(history, path) -> None:
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
