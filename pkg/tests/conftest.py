import numpy as np
import pytest

from sparsecot.model import ModelConfig, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(V=8, D=8, H=2, T=2, alpha=0.75, enc_pattern="window:w=2",
                       dec_self_pattern="topk:k=2+causal", seed=3)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config)


def central_jacobian(f, z, h=1e-6):
    z = np.asarray(z, dtype=float)
    cols = []
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = h
        cols.append((f(z + e) - f(z - e)) / (2 * h))
    return np.stack(cols, axis=-1)
