import numpy as np
import pytest

from roadforest.raster import Image


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_image(rng):
    return Image(rng.integers(0, 256, size=(24, 32, 3), dtype=np.uint8))


def pytest_terminal_summary(terminalreporter):
    import sys

    for name, module in list(sys.modules.items()):
        if name.endswith("test_acceptance") and getattr(module, "RESULTS", None):
            terminalreporter.section("acceptance criteria")
            for line in module.RESULTS:
                terminalreporter.write_line(line)
