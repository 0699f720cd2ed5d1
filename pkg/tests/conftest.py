import numpy as np
import pytest

from sitmlp.data import synth_generate
from sitmlp.network import SitMlpModel

TINY = dict(joints=4, frames=8, persons=1, base_channels=6, heads=2, num_classes=3, precision="float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return SitMlpModel(**TINY)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3 classes x 8 samples on a 4-joint skeleton, 12 raw frames."""
    out = tmp_path_factory.mktemp("tiny_data")
    synth_generate(3, 8, joints=4, frames=12, seed=5, out_dir=out)
    return out


# one (criterion, passed, detail) row per acceptance criterion, filled by test_acceptance
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
