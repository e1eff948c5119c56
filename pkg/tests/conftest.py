import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import helpers  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    if helpers.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(helpers.ACCEPTANCE):
            terminalreporter.write_line(helpers.ACCEPTANCE[num])
