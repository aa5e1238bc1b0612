import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_LINES: dict[str, str] = {}


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    _LINES[f"{criterion:02d}"] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_LINES):
        terminalreporter.write_line(_LINES[key])
