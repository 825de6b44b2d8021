import _acceptance_report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_report.RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for entry in sorted(_acceptance_report.RESULTS):
        terminalreporter.write_line(_acceptance_report.format_line(entry))
