"""
Placing a patch and scoring it
==============================

Render a synthetic scene, drop a patch into it at a few placements and look
at how the softmin expectation blends per-patch losses.
"""
import numpy as np
import torch

from flypatch.attack import softmin_expectation
from flypatch.data import render_scene
from flypatch.geometry import CameraModel, TransformParams, make_affine
from flypatch.placement import place, place_separable

cam = CameraModel()
rng = np.random.default_rng(0)

# a subject one metre ahead, slightly to the left
scene = render_scene(np.array([1.0, 0.3, 0.0, 0.0]), cam, rng).image
print("scene", scene.shape, scene.dtype, scene.min(), scene.max())

patch = rng.uniform(0, 255, (64, 64))

# s scales the patch relative to the frame, tx/ty move it right/down
for t in [TransformParams(0.2, 0.0, 0.0), TransformParams(0.4, -0.5, 0.3)]:
    out = place(scene, patch, make_affine(t))
    changed = np.mean(out != scene)
    print(t, "-> fraction of pixels covered %.3f" % changed)

# the separable route gives the same image for scale/translation placements
p = torch.tensor([[0.4, -0.5, 0.3]], dtype=torch.float64)
fast = place_separable(torch.as_tensor(scene)[None], torch.as_tensor(patch)[None], p)[0]
slow = place(scene, patch, make_affine(TransformParams(0.4, -0.5, 0.3)))
print("max |separable - general|", float(np.abs(fast.numpy() - slow).max()))

# softmin: a convex combination that leans on the best patch
losses = np.array([0.2, 0.9, 1.5])
print("losses", losses, "expectation %.4f" % softmin_expectation(losses))
print("all equal ->", softmin_expectation(np.ones(3)))
