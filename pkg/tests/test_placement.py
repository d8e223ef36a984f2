import numpy as np
import pytest
import torch

from flypatch.geometry import TransformParams, make_affine, make_affine_torch
from flypatch.placement import (add_image_noise, bilinear_sample, clamp_params, clamp_params_,
                                clamp_transform, perspective_patch, perturb_transform, place,
                                place_separable, random_params, random_perspective,
                                random_perspective_matrix)

H, W = 96, 160


def test_place_full_cover():
    out = place(np.zeros((H, W)), np.full((64, 64), 255.0), np.eye(3))
    np.testing.assert_allclose(out, 255.0, atol=1e-9)


def test_place_off_frame():
    out = place(np.full((H, W), 7.0), np.random.default_rng(0).uniform(0, 255, (64, 64)),
                make_affine(TransformParams(0.3, 5.0, 5.0)))
    np.testing.assert_array_equal(out, 7.0)


def test_place_singular():
    with pytest.raises(ValueError, match="singular"):
        place(np.zeros((H, W)), np.zeros((8, 8)), np.diag([0.0, 0.0, 1.0]))


def test_place_grad_tx_fd_constant_patch():
    base = torch.full((H, W), 50.0, dtype=torch.float64)
    patch = torch.full((64, 64), 200.0, dtype=torch.float64)

    def f(tx):
        m = make_affine_torch(torch.tensor(0.3, dtype=torch.float64), tx,
                              torch.tensor(0.0, dtype=torch.float64))
        return place(base, patch, m).mean()

    tx = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(f(tx), tx)
    h = 1e-4
    fd = (f(torch.tensor(h, dtype=torch.float64)) - f(torch.tensor(-h, dtype=torch.float64))) / (2 * h)
    assert float(g) == pytest.approx(float(fd), rel=1e-3, abs=1e-9)


def test_place_matches_separable(rng):
    base = torch.as_tensor(rng.uniform(0, 255, (3, H, W)))
    patch = torch.as_tensor(rng.uniform(0, 255, (3, 32, 48)))
    params = torch.as_tensor(random_params(rng, 3))
    m = make_affine_torch(params[:, 0], params[:, 1], params[:, 2])
    np.testing.assert_allclose(place(base, patch, m).numpy(),
                               place_separable(base, patch, params).numpy(), atol=1e-9)


def test_place_separable_gradients_fd(rng):
    base = torch.as_tensor(rng.uniform(0, 255, (1, H, W)))
    patch = torch.as_tensor(rng.uniform(0, 255, (1, 16, 16)), dtype=torch.float64)
    weights = torch.as_tensor(rng.normal(size=(1, H, W)))
    for _ in range(5):
        prm = torch.as_tensor(random_params(rng, 1)).requires_grad_(True)
        pt = patch.clone().requires_grad_(True)
        f = lambda q, pp: (place_separable(base, pp, q) * weights).sum()
        gp, gpatch = torch.autograd.grad(f(prm, pt), [prm, pt])
        h = 1e-6
        for i in range(3):
            d = torch.zeros_like(prm)
            d[0, i] = h
            with torch.no_grad():
                fd = (f(prm + d, patch) - f(prm - d, patch)) / (2 * h)
            assert float(gp[0, i]) == pytest.approx(float(fd), rel=1e-3, abs=1e-6)
        i, j = rng.integers(16, size=2)
        d = torch.zeros_like(patch)
        d[0, i, j] = 1e-3
        fd = (f(prm.detach(), patch + d) - f(prm.detach(), patch - d)) / 2e-3
        assert float(gpatch[0, i, j]) == pytest.approx(float(fd), rel=1e-6, abs=1e-9)


def test_place_noop_when_patch_equals_base():
    # a base that is linear in the normalized coordinates is reproduced exactly by
    # bilinear sampling of a patch cut from the same plane
    s, tx, ty = 0.3, 0.1, -0.2
    v = np.linspace(-1, 1, H)[:, None]
    u = np.linspace(-1, 1, W)[None, :]
    base = 100 + 30 * u + 20 * v + 0 * u * v
    pv = np.linspace(-1, 1, 64)[:, None]
    pu = np.linspace(-1, 1, 64)[None, :]
    patch = 100 + 30 * (s * pu + tx) + 20 * (s * pv + ty)
    out = place(base, patch, make_affine(TransformParams(s, tx, ty)))
    np.testing.assert_allclose(out, base, atol=1e-9)


def test_place_convex_bounds(rng):
    base = rng.uniform(10, 20, (H, W))
    patch = rng.uniform(100, 200, (32, 32))
    out = place(base, patch, make_affine(TransformParams(0.35, 0.2, 0.1)))
    assert out.min() >= 10 and out.max() <= 200


def test_bilinear_sample_examples():
    p = np.arange(12.0).reshape(3, 4)
    assert bilinear_sample(p, -1.0, -1.0) == 0.0
    assert bilinear_sample(p, 1.0, 1.0) == 11.0
    assert bilinear_sample(p, -1 + 2 / 3, 0.0) == p[1, 1]
    two = np.array([[0.0, 255.0], [0.0, 255.0]])
    assert bilinear_sample(two, 0.0, -1.0) == pytest.approx(127.5)


def test_bilinear_sample_partition_of_unity():
    patch = torch.zeros((5, 5), dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(bilinear_sample(patch, 0.13, -0.42), patch)
    assert float(g.sum()) == pytest.approx(1.0)
    assert int((g != 0).sum()) == 4


def test_clamp_transform_examples():
    assert clamp_transform(TransformParams(0.3, 0, 0)) == TransformParams(0.3, 0, 0)
    assert clamp_transform(TransformParams(0.9, 0, 0)).s == 0.4
    c = clamp_transform(TransformParams(0.3, -1.5, 2))
    assert (c.tx, c.ty) == (-0.999999, 0.999999)


def test_clamp_params_variants():
    p = torch.tensor([[0.1, 2.0, -3.0], [0.5, 0.1, 0.2]])
    out = clamp_params(p)
    clamp_params_(p)
    torch.testing.assert_close(out, p)
    assert float(p[0, 0]) == pytest.approx(0.2) and float(p[1, 0]) == pytest.approx(0.4)


def test_clamp_params_zero_grad_when_active():
    p = torch.tensor([[0.1, 0.0, 0.0]], requires_grad=True)
    (g,) = torch.autograd.grad(clamp_params(p).sum(), p)
    assert float(g[0, 0]) == 0.0 and float(g[0, 1]) == 1.0


def test_random_params_in_bounds(rng):
    p = random_params(rng, (4, 5))
    assert p.shape == (4, 5, 3)
    assert (p[..., 0] >= 0.2).all() and (p[..., 0] <= 0.4).all()
    assert (np.abs(p[..., 1:]) < 1).all()


def test_perturb_transform():
    p = TransformParams(0.3, 0.1, -0.1)
    assert perturb_transform(p, np.random.default_rng(0), sigma=0) == p
    r = np.random.default_rng(0)
    offs = np.array([perturb_transform(TransformParams(0.3, 0.0, 0.0), r).tx
                     for _ in range(100_000)])
    assert abs(offs.mean()) < 0.002


def test_perturb_transform_clamps_floor():
    class Neg:
        def normal(self, mu, sigma, size):
            return np.array([-5.0, 0.0, 0.0])
    assert perturb_transform(TransformParams(0.2, 0, 0), Neg()).s == 0.2


def test_random_perspective_identity_cases(rng):
    img = rng.uniform(0, 255, (H, W))
    np.testing.assert_array_equal(random_perspective(img, rng, p=0.0), img)
    np.testing.assert_array_equal(random_perspective(img, rng, distortion_scale=0.0), img)


def test_random_perspective_constant_image(rng):
    out = random_perspective(np.full((H, W), 42.0), np.random.default_rng(3), p=1.0)
    np.testing.assert_allclose(out, 42.0, atol=1e-9)


def test_perspective_matrix_moves_corners_inward():
    h = random_perspective_matrix(np.random.default_rng(5), 0.2, 1.0)
    corners = np.array([[-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1]], dtype=float)
    mapped = (h @ corners.T).T
    mapped = mapped[:, :2] / mapped[:, 2:]
    assert (np.abs(mapped) <= 1 + 1e-12).all()
    assert (np.abs(mapped) >= 0.8 - 1e-12).all()


def test_perspective_patch_coverage():
    patch = torch.full((2, 16, 16), 9.0, dtype=torch.float64)
    eye = torch.eye(3, dtype=torch.float64).expand(2, 3, 3)
    warped, cov = perspective_patch(patch, eye)
    torch.testing.assert_close(warped, patch)
    torch.testing.assert_close(cov, torch.ones_like(patch))


def test_add_image_noise():
    img = np.zeros((H, W))
    np.testing.assert_array_equal(add_image_noise(img, np.random.default_rng(0), sigma=0), img)
    big = add_image_noise(np.zeros(100_000), np.random.default_rng(0))
    assert abs(big.std() - 10) < 0.2
    a = add_image_noise(img, np.random.default_rng(1))
    b = add_image_noise(img, np.random.default_rng(2))
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, add_image_noise(img, np.random.default_rng(1)))
