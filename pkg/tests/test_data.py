import numpy as np
import pytest

from flypatch.data import (batches, glyph_layout, glyph_masks, load_dataset, render_scene,
                           sample_dataset, save_dataset, split_dataset)
from flypatch.geometry import CameraModel, project_point

CAM = CameraModel()


def _centroid(pose):
    torso, head, _ = glyph_masks(CAM, pose)
    ii, jj = np.nonzero(torso | head)
    return jj.mean(), ii.mean()


def test_on_axis_glyph_centered():
    u, v = _centroid((1, 0, 0, 0))
    assert abs(u - 80) < 1 and abs(v - 48) < 1
    lay = glyph_layout(CAM, (1, 0, 0, 0))
    assert (lay["u"], lay["v"]) == (80, 48)


def test_glyph_scales_with_depth():
    a1 = glyph_layout(CAM, (1, 0, 0, 0))["a"]
    a2 = glyph_layout(CAM, (2, 0, 0, 0))["a"]
    assert a2 == pytest.approx(a1 / 2)


def test_render_deterministic():
    a = render_scene((1.5, 0.2, 0.1, 0.3), CAM, np.random.default_rng(5))
    b = render_scene((1.5, 0.2, 0.1, 0.3), CAM, np.random.default_rng(5))
    np.testing.assert_array_equal(a.image, b.image)
    assert a.image.dtype == np.float32
    assert np.array_equal(a.image, np.round(a.image))
    assert a.image.min() >= 0 and a.image.max() <= 255


def test_render_unlabelable():
    with pytest.raises(ValueError, match="unlabelable"):
        render_scene((0.5, 5.0, 0, 0), CAM)


def test_label_consistency():
    rng = np.random.default_rng(0)
    for _ in range(30):
        pose = (rng.uniform(1.5, 3), rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1), 0.0)
        u, v = _centroid(pose)
        pu, pv = project_point(CAM, pose[:3])
        assert abs(u - pu) < 1 and abs(v - pv) < 1


def test_sample_dataset_bias_and_bounds():
    ds = sample_dataset(100, seed=11)
    positive = int((ds.poses[:, 1] > 0).sum())
    assert 55 <= positive <= 85
    assert (ds.poses[:, 0] >= 0.5).all() and (ds.poses[:, 0] <= 3).all()
    assert ds.images.shape == (100, 96, 160)


def test_sample_dataset_seeds():
    a = sample_dataset(5, seed=1)
    b = sample_dataset(5, seed=1)
    c = sample_dataset(5, seed=2)
    np.testing.assert_array_equal(a.images, b.images)
    assert not np.array_equal(a.poses, c.poses)
    with pytest.raises(ValueError):
        sample_dataset(0)


def test_split_examples():
    ds = sample_dataset(100, seed=0)
    s, e = split_dataset(ds, 0.9, seed=0)
    assert (len(s), len(e)) == (90, 10)
    keys = lambda d: {tuple(p) for p in d.poses}
    assert not keys(s) & keys(e)
    assert keys(s) | keys(e) == keys(ds)
    s2, _ = split_dataset(ds, 0.9, seed=0)
    np.testing.assert_array_equal(s.poses, s2.poses)
    two = ds.subset([0, 1])
    a, b = split_dataset(two, 0.5, seed=3)
    assert (len(a), len(b)) == (1, 1)
    with pytest.raises(ValueError):
        split_dataset(ds, 1.0)


def test_batches():
    rng = np.random.default_rng(0)
    bs = batches(90, 32, rng)
    assert [len(b) for b in bs] == [32, 32, 26]
    assert sorted(np.concatenate(bs).tolist()) == list(range(90))
    assert len(batches(90, 90, rng)) == 1
    with pytest.raises(ValueError):
        batches(90, 0, rng)


def test_dataset_round_trip(tmp_path):
    ds = sample_dataset(4, seed=9)
    save_dataset(ds, tmp_path)
    assert sorted(p.name for p in (tmp_path / "scenes").iterdir()) == \
        [f"{i:05d}.pgm" for i in range(4)]
    header = (tmp_path / "labels.csv").read_text().splitlines()[0]
    assert header == "index,x,y,z,phi"
    back = load_dataset(tmp_path)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.poses, ds.poses)
