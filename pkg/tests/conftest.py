import numpy as np
import pytest
import torch

from helpers import tiny_bundle, tiny_config


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def bundle():
    """Small synthetic long-tail bundle shared across read-only tests."""
    return tiny_bundle()


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def fast_cfg():
    return tiny_config()
