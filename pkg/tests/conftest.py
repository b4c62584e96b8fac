import pytest

_RESULTS = {}


@pytest.fixture
def criterion(request):
    """Record ``(number, title)`` plus a detail line for the acceptance summary."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        _RESULTS[number] = (title, bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {title}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, passed, detail = _RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}  {title}: {detail}")
    n_pass = sum(p for _, p, _ in _RESULTS.values())
    terminalreporter.write_line(f"{n_pass}/{len(_RESULTS)} criteria passed")
