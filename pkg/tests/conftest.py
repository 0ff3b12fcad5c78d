import pytest

_LINES: list[str] = []


class Recorder:
    """Collects one pass/fail line per acceptance criterion for the terminal summary."""

    def __call__(self, key: str, passed: bool, detail: str) -> bool:
        _LINES.append(f"{key} {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    def info(self, key: str, detail: str) -> None:
        _LINES.append(f"{key} INFO  {detail}")


@pytest.fixture(scope="session")
def record():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
