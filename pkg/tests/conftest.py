import numpy as np
import pytest

_ACCEPTANCE: list[tuple[str, bool | None, str]] = []


@pytest.fixture
def record():
    """Record one acceptance criterion outcome for the end-of-run summary."""

    def _record(name: str, passed: bool | None, detail: str = ""):
        # passed=None marks a criterion that was skipped
        _ACCEPTANCE.append((name, passed, detail))
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _ACCEPTANCE:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"{status}  {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
