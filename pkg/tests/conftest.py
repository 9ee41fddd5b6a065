import runs


def pytest_terminal_summary(terminalreporter):
    if runs.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in runs.RESULTS:
            terminalreporter.write_line(line)
