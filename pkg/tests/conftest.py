import numpy as np
import pytest

from vesselda.hsi_core import Domain, PhantomSpec, SamplePair, make_source_phantom, make_target_phantom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_spec(**kw):
    base = dict(height=32, width=32, n_bands=61, seed=0)
    base.update(kw)
    return PhantomSpec(**base)


@pytest.fixture
def tiny_data():
    """8 source images and 4 target cubes at 32x32, 61 bands."""
    sources = []
    for i in range(8):
        img, mask = make_source_phantom(small_spec(seed=100 + i))
        sources.append(SamplePair.create(img, Domain.SOURCE, f"s{i}", mask=mask))
    targets = []
    for i in range(4):
        cube, mask = make_target_phantom(small_spec(seed=200 + i))
        targets.append(SamplePair.create(cube, Domain.TARGET, f"t{i}", mask=mask))
    return sources, targets


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
