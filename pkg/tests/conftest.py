import sys
from collections import defaultdict
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

_outcomes = defaultdict(list)
_details = defaultdict(list)
_titles = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test covers")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _titles[number] = title
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes[number].append(report.passed)


@pytest.fixture
def detail(request):
    """Attach a measured value to the criterion line of the current test."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        _details[marker.args[0]].append(text)

    return add


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_outcomes):
        status = "PASS" if all(_outcomes[number]) else "FAIL"
        extra = "; ".join(_details[number])
        line = f"[{status}] criterion {number}: {_titles[number]}"
        terminalreporter.write_line(line + (f" ({extra})" if extra else ""))
