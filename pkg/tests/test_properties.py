"""Property tests over randomized inputs, 1000 cases per suite."""
import math

import numpy as np
import torch
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flypatch.attack import (argmin_assignment, masked_expectation, sample_assignment,
                             softmin_expectation, softmin_probabilities)
from flypatch.data import batches, split_indices
from flypatch.geometry import (SCALE_MAX, SCALE_MIN, Pose, TransformParams, compose_pose,
                               invert_pose, relative_pose, wrap_angle)
from flypatch.placement import clamp_params, clamp_params_, clamp_transform, perturb_transform

EXAMPLES = 1000
SUITES = (
    "test_clamp_bounds",
    "test_assignment_one_hot",
    "test_partition_split",
    "test_batches_partition",
    "test_convex_combination_bounds",
    "test_masked_expectation_bounds",
    "test_pose_composition_algebra",
)

prop = settings(max_examples=EXAMPLES, deadline=None, derandomize=True,
                suppress_health_check=[HealthCheck.too_slow])

finite = st.floats(-1e3, 1e3, allow_nan=False)
losses = arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 50))
costs = st.integers(1, 5).flatmap(
    lambda m: st.integers(1, 5).flatmap(
        lambda k: arrays(np.float64, (m, k), elements=st.floats(0, 20))))
poses = st.builds(lambda x, y, z, yaw: Pose((x, y, z), yaw),
                  st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(-10, 10))


def _close(a: Pose, b: Pose, tol=1e-9):
    return (np.allclose(a.position, b.position, atol=tol)
            and abs(wrap_angle(a.yaw - b.yaw)) < tol)


@prop
@given(finite, finite, finite, st.integers(0, 2**32 - 1))
def test_clamp_bounds(s, tx, ty, seed):
    p = clamp_transform(TransformParams(s, tx, ty))
    assert SCALE_MIN <= p.s <= SCALE_MAX and abs(p.tx) < 1 and abs(p.ty) < 1
    assert clamp_transform(p) == p
    q = perturb_transform(p, np.random.default_rng(seed))
    assert SCALE_MIN <= q.s <= SCALE_MAX and abs(q.tx) < 1 and abs(q.ty) < 1
    raw = torch.tensor([[s, tx, ty]], dtype=torch.float64)
    out = clamp_params(raw)
    assert torch.equal(out, clamp_params_(raw.clone()))
    assert torch.allclose(out[0], torch.tensor([p.s, p.tx, p.ty], dtype=torch.float64))


@prop
@given(costs, st.integers(0, 2**32 - 1))
def test_assignment_one_hot(cost, seed):
    for a in (argmin_assignment(cost), sample_assignment(cost, np.random.default_rng(seed))):
        assert a.shape == cost.shape and a.dtype == bool
        assert (a.sum(axis=0) == 1).all()
    a = argmin_assignment(cost)
    assert np.allclose(cost[a.argmax(axis=0), np.arange(cost.shape[1])], cost.min(axis=0))


@prop
@given(st.integers(2, 500), st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_partition_split(n, frac, seed):
    train, test = split_indices(n, frac, seed)
    assert len(train) + len(test) == n
    assert np.intersect1d(train, test).size == 0
    assert np.array_equal(np.union1d(train, test), np.arange(n))
    assert len(train) == int(math.floor(frac * n + 0.5))
    again = split_indices(n, frac, seed)
    assert np.array_equal(train, again[0]) and np.array_equal(test, again[1])


@prop
@given(st.integers(1, 300), st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_batches_partition(n, size, seed):
    parts = batches(n, size, np.random.default_rng(seed))
    assert all(1 <= len(b) <= size for b in parts)
    assert np.array_equal(np.sort(np.concatenate(parts)), np.arange(n))


@prop
@given(losses)
def test_convex_combination_bounds(L):
    e = softmin_expectation(L)
    assert L.min() - 1e-9 <= e <= L.max() + 1e-9
    p = softmin_probabilities(L)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
    assert math.isclose(float(softmin_expectation(torch.as_tensor(L))), e, rel_tol=1e-12,
                        abs_tol=1e-12)


@prop
@given(costs, st.integers(0, 2**32 - 1))
def test_masked_expectation_bounds(L, seed):
    active = np.random.default_rng(seed).uniform(size=L.shape) < 0.6
    e = masked_expectation(torch.as_tensor(L), torch.as_tensor(active)).numpy()
    for k in range(L.shape[1]):
        col = L[active[:, k], k]
        if col.size == 0:
            assert e[k] == 0
        else:
            assert col.min() - 1e-9 <= e[k] <= col.max() + 1e-9


@prop
@given(poses, poses, poses)
def test_pose_composition_algebra(a, b, c):
    assert _close(compose_pose(compose_pose(a, b), c), compose_pose(a, compose_pose(b, c)))
    assert _close(compose_pose(a, invert_pose(a)), Pose.identity())
    assert _close(compose_pose(invert_pose(a), a), Pose.identity())
    assert _close(compose_pose(a, Pose.identity()), a)
    assert _close(compose_pose(a, relative_pose(a, b)), b)
    assert -math.pi < a.yaw <= math.pi
