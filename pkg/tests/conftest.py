import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import verdicts  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(verdicts.LINES):
            terminalreporter.write_line(line)
