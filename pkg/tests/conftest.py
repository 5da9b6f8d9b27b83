import os
import sys

import numpy as np
import pytest

# acceptance criteria report one line each; collected here and echoed at the end of the run
CRITERION_LINES = []


def report(line):
    CRITERION_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERION_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


sys.path.insert(0, os.path.dirname(__file__))
