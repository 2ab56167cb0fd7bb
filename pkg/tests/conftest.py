import numpy as np
import pytest

from lightdp.denoiser import Denoiser, DenoiserConfig


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return DenoiserConfig(depth=2, hidden=8, heads=2, horizon=4, obs_dim=5)


@pytest.fixture
def small_net():
    cfg = DenoiserConfig(depth=4, hidden=16, heads=2, horizon=4, obs_dim=5)
    net = Denoiser(cfg, seed=3)
    # give the zero-initialized head some weight so outputs depend on every block
    r = np.random.default_rng(3)
    for k in ("out.w", "out.b"):
        net.params[k].data = r.normal(0, 0.3, net.params[k].shape).astype(np.float32)
    return net


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
