"""
Shared pytest setup: the `slow` marker (skipped unless --runslow) and
hypothesis profiles ("dev" default, "ci" for longer sweeps via HYPOTHESIS_PROFILE).
"""

import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("dev", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "dev"))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    from modules.config import ModelConfig
    return ModelConfig(hidden_irreps="4x0e+2x1o", r_cut=4.0, embed_dim=4, mlp_hidden=8, species=[1, 6, 7, 8])


@pytest.fixture
def water():
    from modules.datasets import molecule
    return molecule("water")
