import sys
from contextlib import contextmanager
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

RESULTS: list[tuple[str, bool]] = []


@contextmanager
def _record(label: str):
    try:
        yield
    except BaseException:
        RESULTS.append((label, False))
        raise
    RESULTS.append((label, True))


@pytest.fixture
def criterion():
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok in sorted(RESULTS, key=lambda r: int(r[0].split(".")[0])):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}")
