import pytest

# (criterion, passed, detail) lines filled in by test_acceptance.py
ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {num}: {'PASS' if passed else 'FAIL'}  {detail}")


@pytest.fixture
def acceptance():
    def record(num, passed, detail):
        ACCEPTANCE.append((num, bool(passed), detail))
        print(f"criterion {num}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed
    return record
