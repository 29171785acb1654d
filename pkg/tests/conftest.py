import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


class _Criterion:
    """Records a pass/fail line for one acceptance criterion, even when the test aborts."""

    def __init__(self):
        self.number, self.title, self.details = None, "", []

    def __call__(self, number, title):
        self.number, self.title = number, title
        return self

    def note(self, text):
        self.details.append(text)

    def finish(self, passed):
        if self.number is not None:
            status = "PASS" if passed else "FAIL"
            ACCEPTANCE_LINES[self.number] = f"criterion {self.number:>2} {status}  {self.title}  [{'; '.join(self.details)}]"


@pytest.fixture
def criterion(request):
    record = _Criterion()
    yield record
    call = getattr(request.node, "rep_call", None)
    record.finish(call is not None and call.passed)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call":
        item.rep_call = report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
