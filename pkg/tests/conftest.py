import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# pass/fail lines appended by the acceptance suite, echoed at the end of the run
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA):
            terminalreporter.write_line(line)
