import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, derandomize=True, max_examples=50)
settings.load_profile("default")

_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion(capsys):
    """Record and print one pass/fail line for an acceptance criterion, then assert it."""
    def record(n: int, ok: bool, detail: str):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA[n] = line
        with capsys.disabled():
            print("\n" + line, flush=True)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
