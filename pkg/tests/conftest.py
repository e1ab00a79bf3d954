import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from canids.synth import SynthProfile, simulate_traffic  # noqa: E402

# Acceptance tests append (criterion, passed, detail) here; printed at the end of the run.
CRITERIA: list[tuple[int, bool, str]] = []


@pytest.fixture(scope="session")
def short_drive():
    """A 30 s driving log with its database; shared by the unit tests."""
    return simulate_traffic(SynthProfile(duration=30.0, seed=11))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
