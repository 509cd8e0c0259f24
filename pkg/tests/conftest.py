import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    rows = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when == "call" and "test_acceptance.py::test_criterion_" in rep.nodeid:
                props = dict(rep.user_properties)
                rows.append((rep.nodeid.split("::")[-1], outcome, props.get("measured", "")))
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome, measured in sorted(rows, key=lambda r: int(r[0].split("_")[2])):
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}  {measured}")
