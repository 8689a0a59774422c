import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

ROOT = Path(__file__).resolve().parent.parent
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

# the reference machine is slow; wall-clock deadlines only produce flakes here
settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow], max_examples=100
)
settings.register_profile("ci", parent=settings.get_profile("default"), derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_RESULTS_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_RESULTS_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Use as ``with acceptance(3, "ticker plant oracle") as note: ... note("detail")``.
    """
    from contextlib import contextmanager

    results = request.config.stash[_RESULTS_KEY]

    @contextmanager
    def record(number: int, title: str):
        details: list[str] = []
        try:
            yield details.append
        except BaseException as exc:
            line = f"criterion {number:>2} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
            results.append(line)
            print(line)
            raise
        line = f"criterion {number:>2} PASS  {title}" + (f" ({'; '.join(details)})" if details else "")
        results.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS_KEY, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in sorted(results, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
