import pytest

_ACCEPTANCE = {}


@pytest.fixture(scope="session")
def acceptance_report():
    """``record(number, name, passed, detail)`` stores one criterion outcome
    for the end-of-run summary."""

    def record(number, name, passed, detail=""):
        _ACCEPTANCE[number] = (name, bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {name} {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(
            f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {name}  [{detail}]"
        )
