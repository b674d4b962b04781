import pytest

# criterion id -> (passed, detail); filled by test_acceptance.py
VERDICTS = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    VERDICTS[criterion] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(VERDICTS, key=lambda k: (int(k.split()[0].rstrip("abc")), k)):
        passed, detail = VERDICTS[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if passed else 'FAIL'}  {detail}")
