import numpy as np
import pytest

from aidflow.config import DataConfig, ModelConfig
from aidflow.trainer import ToyData

SMALL = ModelConfig(num_blocks=2, feature_dim=16, num_heads=2, text_len=8, image_len=16, vocab_size=16, aid_hidden_dim=8)
TINY_DATA = DataConfig(train_size=64, val_size=32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def tiny_data():
    return ToyData.build(TINY_DATA, SMALL)


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f()
        flat[i] = orig - eps
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Print and keep one PASS/FAIL line per acceptance criterion."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE.append((number, ok, detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
