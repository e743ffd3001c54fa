import numpy as np
import pytest

from ggb.training import TrainConfig

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**kw) -> TrainConfig:
    """32 px, depth 3, two GGBs and a handful of channels: about 0.1 s per step."""
    base = dict(resolution=32, depth=3, num_ggbs=2, batch_size=2, num_pairs=8, g_base=4, g_cap=8, d_base=4,
                d_cap=8, ggb_feat=(4, 4), ggb_disc=4, steps=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
