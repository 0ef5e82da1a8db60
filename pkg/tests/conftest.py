import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

_RESULTS: list[tuple[str, bool, str]] = []


def record_result(cid, ok, detail):
    line = "[%s] %s %s" % (cid, "PASS" if ok else "FAIL", detail)
    print(line)
    _RESULTS.append((cid, ok, detail))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in _RESULTS:
        terminalreporter.write_line("[%s] %s %s" % (cid, "PASS" if ok else "FAIL", detail))
