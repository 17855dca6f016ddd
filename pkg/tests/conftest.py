import pytest

_acceptance: dict[int, tuple[str, bool, str]] = {}


class AcceptanceLog:
    """Collects one verdict per acceptance criterion for the terminal summary."""

    def record(self, number: int, title: str, passed: bool, detail: str) -> bool:
        _acceptance[number] = (title, bool(passed), detail)
        print(f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceLog:
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        title, passed, detail = _acceptance[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if passed else 'FAIL'}  {detail}")
