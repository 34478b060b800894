import sys
import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def disk_mask(radius, size=128, center=None, label=1):
    c = (size / 2, size / 2) if center is None else center
    yy, xx = np.mgrid[0:size, 0:size]
    m = np.zeros((size, size), dtype=np.int64)
    m[(xx + 0.5 - c[0]) ** 2 + (yy + 0.5 - c[1]) ** 2 <= radius**2] = label
    return m


def rect_mask(w, h, size=128, label=1):
    m = np.zeros((size, size), dtype=np.int64)
    y0, x0 = (size - h) // 2, (size - w) // 2
    m[y0:y0 + h, x0:x0 + w] = label
    return m


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
