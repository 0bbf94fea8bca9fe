import pytest

# (criterion number, title, passed, detail) appended by test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[int, str, bool | None, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {number} [{status}] {title}: {detail}")


@pytest.fixture
def record_criterion():
    def record(number, title, passed, detail):
        ACCEPTANCE_RESULTS.append((number, title, passed, detail))
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        return passed

    return record
