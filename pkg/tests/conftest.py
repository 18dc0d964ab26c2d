import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_verdicts: dict[str, tuple[str, str]] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    ok = call.excinfo is None
    _verdicts[item.nodeid] = (mark.args[0], "PASS" if ok else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for label, verdict in _verdicts.values():
        terminalreporter.write_line(f"{verdict}  {label}")
