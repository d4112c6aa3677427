import numpy as np
import pytest

from rotshield.defense import DefenseConfig
from rotshield.harness import protect_model
from rotshield.model import build_toy_model, probe_inputs

SMALL_DIMS = (64, 32, 16)


@pytest.fixture(scope="session")
def small_model():
    return build_toy_model(SMALL_DIMS, seed=0, outliers=[(0, 7, 32.0)])


@pytest.fixture(scope="session")
def small_probe():
    return probe_inputs(SMALL_DIMS[0], 32, seed=2)


@pytest.fixture(scope="session")
def small_protected(small_model):
    calib = probe_inputs(SMALL_DIMS[0], 512, seed=1)
    model, _ = protect_model(small_model, calib, DefenseConfig(requantize_fused=True))
    return model


def words(model):
    return b"".join(np.ascontiguousarray(l.fused_weights.values).tobytes() for l in model.layers)


DEFAULT_DIMS = (256, 128, 32)


@pytest.fixture(scope="session")
def default_model():
    return build_toy_model(DEFAULT_DIMS, seed=0, outliers=[(0, 7, 32.0)])


@pytest.fixture(scope="session")
def default_probe():
    return probe_inputs(DEFAULT_DIMS[0], 64, seed=2)


@pytest.fixture(scope="session")
def default_calib():
    return probe_inputs(DEFAULT_DIMS[0], 1024, seed=1)


@pytest.fixture(scope="session")
def default_protected(default_model, default_calib):
    model, _ = protect_model(default_model, default_calib, DefenseConfig(requantize_fused=True))
    return model


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
