import pytest

CRITERIA: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    CRITERIA[n] = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(CRITERIA[n])
    return ok


@pytest.fixture
def criterion():
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
