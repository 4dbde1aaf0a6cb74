import numpy as np
import pytest
from scipy.spatial.transform import Rotation


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotations(rng, n):
    return Rotation.random(n, random_state=rng).as_matrix()


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: criterion(number, ok, detail)."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        lines[number] = f"criterion {number}: {status}  {detail}"
        print(lines[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
