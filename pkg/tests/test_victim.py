import struct

import numpy as np
import pytest
import torch

from flypatch.data import sample_dataset
from flypatch.victim import (INT8_MAX, ModelFormatError, SurrogateUnderTrained, VictimModel,
                             forward, load_model, quantize_model, quantize_tensor, save_model,
                             train_surrogate, working_copy)

from conftest import random_model


def test_zero_model_outputs_head_bias():
    m = VictimModel().double()
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.fc2.bias.copy_(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    out = forward(m, np.zeros((96, 160)))
    np.testing.assert_array_equal(out.detach().numpy(), [1, 2, 3, 4])


def test_forward_shapes_and_errors(small_model):
    assert forward(small_model, np.zeros((96, 160))).shape == (4,)
    assert forward(small_model, np.zeros((5, 96, 160))).shape == (5, 4)
    assert small_model(torch.zeros(2, 1, 96, 160, dtype=torch.float64)).shape == (2, 4)
    with pytest.raises(ValueError):
        forward(small_model, np.zeros((90, 160)))


def test_input_gradient_fd(small_model, rng):
    img = torch.as_tensor(rng.uniform(0, 255, (96, 160)), dtype=torch.float64).requires_grad_(True)
    (g,) = torch.autograd.grad(small_model(img)[0], img)
    for _ in range(5):
        i, j = rng.integers(96), rng.integers(160)
        d = torch.zeros_like(img)
        d[i, j] = 1e-3
        with torch.no_grad():
            fd = (small_model(img + d)[0] - small_model(img - d)[0]) / 2e-3
        assert float(g[i, j]) == pytest.approx(float(fd), rel=1e-3, abs=1e-10)


def test_parameter_count():
    n = sum(p.numel() for p in VictimModel().parameters())
    assert 5_000 < n < 60_000


def test_quantize_examples():
    snapped, scale = quantize_tensor(torch.tensor([1.0, -0.5, 0.1234], dtype=torch.float64))
    assert scale == pytest.approx(1 / 127)
    assert float(snapped[1]) == pytest.approx(-64 / 127)
    assert float(snapped[2]) == pytest.approx(16 / 127)
    assert float(snapped[0]) == pytest.approx(1.0)


def test_quantize_zero_tensor():
    snapped, scale = quantize_tensor(torch.zeros(3))
    assert scale == 1.0 and float(snapped.abs().sum()) == 0.0


def test_quantize_model_grid_and_idempotence(small_model):
    q = quantize_model(small_model)
    for name, p in q.named_parameters():
        k = p.detach() / q.scales[name]
        torch.testing.assert_close(k, torch.round(k), rtol=0, atol=1e-9)
        assert float(torch.round(k).abs().max()) <= INT8_MAX
    qq = quantize_model(q)
    for a, b in zip(q.parameters(), qq.parameters()):
        torch.testing.assert_close(a, b, rtol=0, atol=1e-15)
    # original untouched
    assert any(not torch.equal(a, b) for a, b in zip(small_model.parameters(), q.parameters()))


def test_quantization_effect_is_finite(small_model, rng):
    imgs = torch.as_tensor(rng.uniform(0, 255, (4, 96, 160)))
    diff = (small_model(imgs) - quantize_model(small_model)(imgs)).abs().mean()
    assert torch.isfinite(diff)


def test_save_load_round_trip(tmp_path, small_model, rng):
    path = tmp_path / "m.pfvm"
    save_model(small_model, path)
    loaded = load_model(path)
    imgs = torch.as_tensor(rng.uniform(0, 255, (10, 96, 160)))
    assert torch.equal(small_model(imgs), loaded(imgs))
    save_model(loaded, tmp_path / "again.pfvm")
    assert path.read_bytes() == (tmp_path / "again.pfvm").read_bytes()


def test_load_errors(tmp_path, small_model):
    path = tmp_path / "m.pfvm"
    save_model(small_model, path)
    buf = path.read_bytes()
    (tmp_path / "trunc.pfvm").write_bytes(buf[:-5])
    with pytest.raises(ModelFormatError, match="truncated") as info:
        load_model(tmp_path / "trunc.pfvm")
    assert info.value.offset > 0
    (tmp_path / "ver.pfvm").write_bytes(buf[:4] + struct.pack("<I", 99) + buf[8:])
    with pytest.raises(ModelFormatError, match="unsupported model version"):
        load_model(tmp_path / "ver.pfvm")
    (tmp_path / "magic.pfvm").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ModelFormatError, match="magic"):
        load_model(tmp_path / "magic.pfvm")
    (tmp_path / "trail.pfvm").write_bytes(buf + b"\0")
    with pytest.raises(ModelFormatError, match="trailing"):
        load_model(tmp_path / "trail.pfvm")


def test_working_copy_is_frozen(small_model):
    w = working_copy(small_model)
    assert w.conv1.weight.dtype == torch.float32
    assert not any(p.requires_grad for p in w.parameters())
    assert w.norm.dtype == torch.float64


def test_train_surrogate_determinism_and_gate():
    ds = sample_dataset(40, seed=3)
    a = train_surrogate(ds, seed=1, epochs=1, mse_gate=1e9, channels=(4, 8, 8), hidden=8)
    b = train_surrogate(ds, seed=1, epochs=1, mse_gate=1e9, channels=(4, 8, 8), hidden=8)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    with pytest.raises(SurrogateUnderTrained, match="under-trained"):
        train_surrogate(ds, seed=1, epochs=1, mse_gate=1e-9, channels=(4, 8, 8), hidden=8)


def test_train_surrogate_empty():
    ds = sample_dataset(1, seed=0)
    with pytest.raises(ValueError):
        train_surrogate(ds.subset([]), epochs=1)
