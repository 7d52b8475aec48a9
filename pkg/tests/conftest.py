import pytest

CRITERIA = ("G1", "G2", "G3", "G4", "H1", "E1", "E2", "E3", "R1", "F1")
_verdicts = {}


@pytest.fixture
def verdict():
    """Record an acceptance verdict; returns ``ok`` so the test can assert on it."""

    def record(name, ok, detail=""):
        _verdicts[name] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in CRITERIA:
        if name in _verdicts:
            ok, detail = _verdicts[name]
            terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"{name} FAIL  (not evaluated)")
