import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(int(os.environ.get("SSTG_THREADS", "1")))

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed as one line per criterion at the end of the run
CRITERIA = {}


@pytest.fixture
def criterion(request):
    """``criterion(ok, detail)`` records the verdict for the test's criterion and asserts it.

    The criterion number is read from the test name (``test_criterion_07_...``).
    A test that errors before recording is reported as FAIL.
    """
    number = int(request.node.name.split("_")[2])

    def record(ok, detail):
        CRITERIA[number] = (bool(ok), detail)
        assert ok, detail

    yield record
    CRITERIA.setdefault(number, (False, "did not reach a verdict (error during run)"))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
