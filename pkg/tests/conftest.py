import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from nsvit import rng as rngs
from nsvit.noise import learn_eps_noise
from nsvit.pipeline import desk_pretrained
from nsvit.vit import ModelConfig, ViTParams

TINY = ModelConfig(image_size=8, patch_size=4, channels=2, embed_dim=8, heads=2, depth=1, mlp_ratio=2, num_classes=3)


def fd_grad(f, x, h=1e-5, index=None):
    """Central-difference gradient of scalar ``f`` at ``x`` (optionally only at flat ``index``)."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(flat.size) if index is None else np.zeros(len(index))
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i if index is None else k] = (fp - fm) / (2 * h)
    return out.reshape(x.shape) if index is None else out


def rel_err(a, b, floor=1e-12):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


@pytest.fixture(autouse=True, scope="session")
def single_thread():
    with threadpool_limits(limits=1):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_params():
    return ViTParams.init(TINY, np.random.default_rng(7), np.float64)


@pytest.fixture
def toy_params():
    return ViTParams.init(ModelConfig(), np.random.default_rng(11), np.float64)


@pytest.fixture(scope="session")
def desk():
    """The toy model pretrained on the synthetic desk dataset (seed 0, about 35 s)."""
    return desk_pretrained(0)


@pytest.fixture(scope="session")
def desk_noise(desk):
    """One eps=0.03 noise for the desk model, gated on the first 512 training images, and its learning time."""
    start = time.perf_counter()
    result = learn_eps_noise(desk.params, desk.train, eps=0.03, max_steps=1000, rng=rngs.stream(0, rngs.NOISE_INIT, 0),
                             confirm_set=desk.train.subset(slice(0, 512)), confirm_gate=True)
    return result, time.perf_counter() - start


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion for the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
