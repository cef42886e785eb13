from acceptance_log import RESULTS


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(RESULTS):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  C{number:<2} {title}: {detail}")
