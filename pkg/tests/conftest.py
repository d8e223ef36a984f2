import numpy as np
import pytest
import torch

from flypatch.victim import VictimModel


def constant_model(value, dtype=torch.float64):
    """A victim whose output ignores the image: every weight zero, head bias ``value``."""
    m = VictimModel().to(dtype)
    with torch.no_grad():
        for p in m.parameters():
            p.zero_()
        m.fc2.bias.copy_(torch.as_tensor(value, dtype=dtype))
    m.requires_grad_(False)
    m.eval()
    return m


def random_model(seed=0, dtype=torch.float64, channels=(4, 8, 8), hidden=8):
    torch.manual_seed(seed)
    m = VictimModel(channels, hidden).to(dtype)
    m.eval()
    return m


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return random_model()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
