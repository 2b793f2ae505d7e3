"""Shared pytest wiring: surface acceptance verdicts in the summary."""
import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    for name, mod in list(sys.modules.items()):
        if name.rpartition(".")[2] == "test_acceptance":
            verdicts = getattr(mod, "VERDICTS", None)
            if verdicts:
                terminalreporter.write_line("")
                for line in verdicts:
                    terminalreporter.write_line(line)
            return
