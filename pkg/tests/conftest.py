import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sepkit import engine

settings.register_profile("sepkit", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sepkit")


def identity_mlp(W, b):
    """mlp-small whose hidden layers pass non-negative inputs through unchanged,
    so its logits are exactly ``W @ x + b`` and its features equal ``x``."""
    C, D = W.shape
    arch = engine.mlp_small((1, 1, D), C, hidden=(D, D), input_offset=0.0)
    eye = np.eye(D)
    return engine.ModelCheckpoint.from_arrays(arch, {
        "fc0.w": eye, "fc1.w": eye, "head.w": W, "head.b": b,
    })


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cnn():
    arch = engine.cnn_small((2, 6, 6), 3, channels=(3, 4), hidden=5)
    return engine.init_params(arch, 7)


@pytest.fixture(scope="session")
def small_mlp():
    arch = engine.mlp_small((2, 4, 4), 3, hidden=(6, 5))
    return engine.init_params(arch, 3)


def pytest_terminal_summary(terminalreporter):
    from _acceptance import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: (not k.isdigit(), int(k) if k.isdigit() else 0, k)):
        ok, detail = RESULTS[key]
        label = f"C{key}" if key.isdigit() else key
        terminalreporter.write_line(f"ACCEPTANCE {label} {'PASS' if ok else 'FAIL'}: {detail}")
