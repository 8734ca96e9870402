import pytest

# criterion label ("1", "7a", ...) -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture
def record_criterion():
    def record(label, passed, detail):
        ACCEPTANCE[str(label)] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    def order(label):
        digits = "".join(c for c in label if c.isdigit())
        return int(digits), label

    for label in sorted(ACCEPTANCE, key=order):
        passed, detail = ACCEPTANCE[label]
        terminalreporter.write_line(f"criterion {label:>3}: {'PASS' if passed else 'FAIL'}  {detail}")
