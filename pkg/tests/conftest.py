import numpy as np
import pytest

from adadecode.bench import default_workload
from adadecode.model import ModelConfig, init_random_model
from adadecode.rng import Rng


@pytest.fixture(scope="session")
def toy_model():
    """Default-config model with random (untrained) weights."""
    return init_random_model(ModelConfig(), Rng(1234))


@pytest.fixture(scope="session")
def small_model():
    """Tiny config for tests that iterate many forward passes."""
    cfg = ModelConfig(num_layers=3, hidden_dim=16, num_attn_heads=2,
                      vocab_size=32, max_positions=96)
    return init_random_model(cfg, Rng(99))


@pytest.fixture(scope="session")
def workload():
    """The default trained workload (pretrained model + distilled heads).

    Built once per session; shared by the benchmark-direction tests and the
    acceptance criteria that reference the default workload.
    """
    return default_workload(seed=0)


def assert_close(a, b, tol, msg=""):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    err = np.max(np.abs(a - b)) if a.size else 0.0
    assert err <= tol, f"{msg} max abs err {err} > {tol}"
