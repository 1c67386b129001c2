import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance verdict; the terminal summary prints them all."""

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        _VERDICTS.append((number, title, passed, detail))
        print(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(_VERDICTS, key=lambda v: v[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number} ({title}): {detail}")
