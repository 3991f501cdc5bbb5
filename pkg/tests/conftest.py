import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance verdict lines even when stdout capture ate them."""
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
