import fixture_data


def pytest_terminal_summary(terminalreporter):
    if fixture_data.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in fixture_data.RESULTS:
            terminalreporter.write_line(line)
