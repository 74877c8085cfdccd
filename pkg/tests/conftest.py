from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance = []


@pytest.fixture
def snippet_path():
    return FIXTURES / "beam_select_snippet.log"


@pytest.fixture
def inversion_csv():
    return FIXTURES / "reward_inversion_results.csv"


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py::" in report.nodeid:
        _acceptance.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
