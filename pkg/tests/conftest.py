"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

CRITERIA = {}


def record(number, ok, detail):
    """Register the outcome of one acceptance check (several checks may share a number)."""
    CRITERIA.setdefault(number, []).append((bool(ok), detail))
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        checks = CRITERIA[number]
        status = "PASS" if all(ok for ok, _ in checks) else "FAIL"
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {detail}")
