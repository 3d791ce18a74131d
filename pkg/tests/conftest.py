import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion results registered by test_acceptance.py, echoed after the run so
# the pass/fail lines survive pytest's output capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
