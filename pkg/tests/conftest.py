import pytest

_ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance result; printed as a PASS/FAIL line in the terminal summary."""

    def record(number, title, passed, detail=""):
        _ACCEPTANCE[number] = (title, bool(passed), detail)
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(
            f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
        )
