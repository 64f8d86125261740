import sys
from pathlib import Path

import numpy as np
import pytest

# Add scripts directory to path
script_dir = Path(__file__).resolve().parent.parent / "scripts"
sys.path.append(str(script_dir))

from tensor_core import RngState  # noqa: E402
from transformer_qnet import LayerKind, QNetworkSpec  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale reproductions")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale reproduction, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return RngState(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_spec():
    """A network small enough to train inside a unit test."""
    return QNetworkSpec(
        history_horizon=3,
        state_dim=4,
        model_dim=8,
        num_heads=2,
        num_layers=1,
        ff_dim=16,
        num_actions=2,
        layer_kind=LayerKind.NO_DROPOUT,
    )


@pytest.fixture
def empty_environ():
    return {}
