import verdicts


def pytest_terminal_summary(terminalreporter):
    if verdicts.LINES:
        terminalreporter.section("acceptance")
        for line in verdicts.LINES:
            terminalreporter.write_line(line)
