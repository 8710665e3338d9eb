import pytest

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion (printed at the end)."""

    def _report(number: int, ok: bool, detail: str) -> None:
        prev = CRITERIA.get(number)
        if prev is not None:
            ok = ok and prev[0]
            detail = f"{prev[1]}; {detail}"
        CRITERIA[number] = (bool(ok), detail)

    return _report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
