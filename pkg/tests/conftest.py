"""Session plumbing for the acceptance verdicts.

Default pytest capture redirects file descriptor 1 itself, so lines printed
during a passing test never reach the terminal or a teed log. Verdicts are
therefore recorded here and replayed in the terminal summary, which runs
outside capture.
"""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
