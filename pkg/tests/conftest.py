import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

_ACCEPTANCE = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def record_criterion():
    """Collect one (id, passed, detail) line per acceptance criterion."""

    def _record(cid, passed, detail=""):
        status = {True: "PASS", False: "FAIL", None: "UNVERIFIED"}[passed]
        line = f"ACCEPTANCE {cid:<4s} {status:<10s} {detail}"
        _ACCEPTANCE.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)

