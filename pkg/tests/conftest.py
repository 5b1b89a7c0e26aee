"""Shared pytest configuration.

Adds a terminal-summary section listing every acceptance check with its
outcome, one line each, so the pass/fail status survives in logs even when
the run output is long.
"""

ACCEPTANCE_FILE = "test_acceptance.py"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if ACCEPTANCE_FILE not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            # a setup/teardown error trumps a recorded call outcome
            if status == "error" or name not in outcomes:
                outcomes[name] = "PASS" if status == "passed" else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance checks")
    for name in sorted(outcomes):
        terminalreporter.write_line(f"{name}: {outcomes[name]}")
