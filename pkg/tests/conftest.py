from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

_ACCEPTANCE: list[tuple[str, str, str]] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion's outcome for the terminal summary."""

    def _record(label: str, detail: str = "") -> None:
        request.node._criterion = (label, detail)

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    info = getattr(item, "_criterion", None)
    if info and rep.when == "call":
        _ACCEPTANCE.append((info[0], "PASS" if rep.passed else "FAIL", info[1]))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{status}  {label}" + (f"  ({detail})" if detail else ""))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))
