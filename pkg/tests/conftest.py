import sys

import numpy as np
import pytest

from mhimil.dataio import Bag
from mhimil.milmodel import ModelConfig, init_params


def random_bag(rng, n, response_dim=4, prefix_dim=2, bag_id="b0", target=0.5, isl=None):
    prefix = rng.uniform(-1, 1, (n, prefix_dim)) if prefix_dim else None
    return Bag(bag_id, rng.uniform(-1, 1, (n, response_dim)), target, prefix=prefix, isl=isl)


@pytest.fixture
def small_config():
    return ModelConfig(response_dim=4, prefix_dim=2, proj_dim=3, lstm_hidden=2, attn_dim=3, seed=1)


@pytest.fixture
def small_params(small_config):
    return init_params(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
