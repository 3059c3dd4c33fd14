"""Shared test plumbing: the acceptance-criterion summary block."""

_criteria: list[tuple[int, str]] = []


def record_criterion(n: int, name: str, passed: bool, detail: str) -> None:
    tag = "PASS" if passed else "FAIL"
    _criteria.append((n, f"{tag} criterion {n} ({name}): {detail}"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_criteria):
        terminalreporter.write_line(line)
