import acceptance_log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_log.RESULTS:
        terminalreporter.write_sep("-", "acceptance criteria")
        for _, line in sorted(acceptance_log.RESULTS):
            terminalreporter.write_line(line)
