import numpy as np
import pytest

from dlab.datasets import Factor, FactorSpec
from dlab.models import ModelConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end experiment runs (minutes of CPU)")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def factorial(cards, repeats=1):
    """Balanced full-factorial factor table (1-based), each tuple ``repeats`` times."""
    spec = FactorSpec(tuple(Factor(f"f{i}", cardinality=c) for i, c in enumerate(cards)))
    return spec, np.repeat(spec.grid(), repeats, axis=0)


@pytest.fixture
def perfect_grid():
    """(spec, factors) of a 4x4x3 grid repeated to ~10^4 rows."""
    return factorial((4, 4, 3), repeats=209)


def tiny_config(**overrides):
    base = dict(latent_kind="discrete", n=2, m=8, preset="mlp_small", image_size=8, hidden=16,
                steps=5, batch_size=8, seed=0, lr=1e-3, log_every=1, disc_width=8, disc_depth=2)
    base.update(overrides)
    return ModelConfig(**base)
