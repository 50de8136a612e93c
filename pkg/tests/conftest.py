import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report one line each; collected here and echoed at the end
_CRITERIA: dict[int, str] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    number = item.get_closest_marker("criterion")
    if number is None or rep.when != "call":
        return
    n = number.args[0]
    detail = getattr(item, "criterion_detail", "")
    verdict = "PASS" if rep.passed else "FAIL"
    _CRITERIA[n] = f"criterion {n:>2}: {verdict}  {detail}".rstrip()
    print(f"\n{_CRITERIA[n]}")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])


@pytest.fixture
def detail(request):
    """Record a one-line summary for the running acceptance criterion."""
    def record(text: str) -> None:
        request.node.criterion_detail = text
    return record
