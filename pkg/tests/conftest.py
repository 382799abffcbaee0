"""
Configures the 'slow' marker for tests that train models for minutes on CPU,
and shared fixtures.

Adapted from https://docs.pytest.org/en/latest/example/simple.html#control-skipping-of-tests-according-to-command-line-option
"""

import pytest
import torch

from mci_mae.models import build_model
from mci_mae.tokenizer import MultiChannelImage

from utils.factories import small_model_config


def pytest_addoption(parser):
    parser.addoption(
        "--runslow",
        action="store_true",
        default=False,
        help="run tests that train models for several minutes",
    )


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: mark test as a long-running training experiment"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        # --runslow given in cli: do not skip slow tests
        return

    skip_slow = pytest.mark.skip(reason="need --runslow option to run")

    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_model():
    return build_model(small_model_config(), channel_ids=(0, 1, 2), seed=0)


@pytest.fixture
def random_image():
    generator = torch.Generator().manual_seed(0)
    return MultiChannelImage(torch.randn(3, 16, 16, generator=generator), (0, 1, 2))
