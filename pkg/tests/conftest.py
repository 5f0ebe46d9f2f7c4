import pytest

_VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one pass/fail line per acceptance criterion."""

    def record(criterion: int, ok: bool, detail: str) -> bool:
        _VERDICTS[criterion] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        ok, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
