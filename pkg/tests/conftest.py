import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(mod.RESULTS, key=lambda r: str(r[0]).zfill(3)):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}")
    for note in mod.NOTES:
        terminalreporter.write_line("")
        for line in note.splitlines():
            terminalreporter.write_line(line)
