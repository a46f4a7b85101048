from pathlib import Path

import numpy as np
import pytest

from tendonarm import body_image as bi
from tendonarm import plant as pl
from tendonarm.kinematics import default_model

DATA = Path(__file__).resolve().parents[1] / "src" / "tendonarm" / "data"


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def plant_cfg():
    return pl.default_plant_config()


@pytest.fixture(scope="session")
def image():
    """The shipped initial image (fit to the nominal model)."""
    return bi.load_image(DATA / "initial.img")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def interior_postures(model, n, seed=0, shrink=0.8):
    ch = model.chain
    mid, half = (ch.lower + ch.upper) / 2, (ch.upper - ch.lower) / 2
    r = np.random.default_rng(seed)
    return mid + shrink * half * r.uniform(-1, 1, (n, ch.n_joints))


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
