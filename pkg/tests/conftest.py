import pytest

_RESULTS = []


@pytest.fixture(scope="session")
def record():
    """Store one acceptance verdict: ``record(cid, ok, detail)``."""
    def _record(cid, ok, detail=""):
        _RESULTS.append((cid, bool(ok), detail))
        return ok
    return _record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in sorted(_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {cid}  {detail}")
