import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line, then fail the test if the criterion was missed."""
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(key: str, passed: bool, detail: str) -> None:
        lines[key] = (bool(passed), detail)
        assert passed, f"criterion {key}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(lines, key=lambda k: (int("".join(c for c in k if c.isdigit()) or 0), k)):
        passed, detail = lines[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {key:<4} {detail}")
