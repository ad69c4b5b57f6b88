import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# PASS/FAIL lines from the acceptance suite, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
