import numpy as np
import pytest

from fpaenet.config import ModelConfig


def small_config(**overrides):
    """A float32 detector small enough to train a few steps inside a unit test."""
    base = {
        "backbone.input_size": 64, "backbone.stem_stride": 2, "backbone.stem_channels": 4,
        "backbone.channels": 8, "backbone.blocks_per_stage": 1, "head.depth": 1,
        "optim.lr": 1e-3, "optim.max_steps": 3, "data.count": 6,
    }
    base.update(overrides)
    return ModelConfig().replace(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    return small_config()


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
