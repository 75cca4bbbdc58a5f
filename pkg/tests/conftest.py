import numpy as np
import pytest
import torch

from seqclr.data import render_synthetic

_CRITERIA: list[str] = []


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    return render_synthetic(root, 24, length_range=(3, 5), seed=11)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion; the summary prints them all."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number, passed: bool, detail: str):
        line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        _CRITERIA.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
