import numpy as np
import pytest
import torch

from unilseg.model import PRESETS, UniLSeg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return UniLSeg(PRESETS["tiny"]).double()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
