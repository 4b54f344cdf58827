import sys


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, if those tests ran."""
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(mod.RESULTS):
        parts = mod.RESULTS[c]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{label + ': ' if label else ''}{'PASS' if o else 'FAIL'} ({d})"
                           for label, o, d in parts)
        terminalreporter.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'}  {detail}")
