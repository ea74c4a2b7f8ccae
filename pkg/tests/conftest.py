_VERDICTS: list[tuple[str, bool, str]] = []


def record_verdict(name: str, passed: bool, detail: str) -> None:
    _VERDICTS.append((name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _VERDICTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
