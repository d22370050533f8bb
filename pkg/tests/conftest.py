import pytest

from circuit_seed.core_math import make_rng
from circuit_seed.lora_mlp import AdaptedModel
from circuit_seed.tasks import TargetSpec, make_task


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-second protocol runs")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def sparse_task():
    return make_task(TargetSpec(kind="sparse_b", seed=0))


@pytest.fixture(scope="session")
def dense_task():
    return make_task(TargetSpec(kind="dense_rank2", seed=0))


def small_model(rng, in_dim=6, hidden=5, out_dim=3, rank=2, b_std=0.5, scale=1.0):
    m = AdaptedModel.init(rng, in_dim, hidden, out_dim, rank, scale)
    if b_std:
        m.b = rng.normal(0, b_std, size=m.b.shape)
    return m
