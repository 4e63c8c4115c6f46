import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for r in sorted(acceptance_log.RESULTS, key=lambda r: r.number):
        status = "PASS" if r.passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {r.number:>2}. {r.title} ({r.elapsed:.3f}s, limit {r.limit:g}s)")
