"""Shared pytest plumbing.

The acceptance tests record one human-readable verdict line per gate; the
terminal-summary hook prints them after the run so the lines survive output
capture and land in piped logs.
"""
import time
from contextlib import contextmanager

GATE_LINES: list[str] = []


@contextmanager
def timed_gate(name: str, budget_s: float, carried_s: float = 0.0):
    """Time a gate body, record `<name>: PASS/FAIL (elapsed, budget)`, and
    enforce the runtime budget.  ``carried_s`` charges setup work done in a
    shared fixture to this gate.  A failing body records FAIL and re-raises."""
    t0 = time.perf_counter()
    failed = None
    try:
        yield
    except BaseException as exc:
        failed = exc
        raise
    finally:
        elapsed = time.perf_counter() - t0 + carried_s
        verdict = "PASS" if failed is None and elapsed < budget_s else "FAIL"
        GATE_LINES.append(f"{name}: {verdict} ({elapsed:.1f}s, budget {budget_s:.0f}s)")
        if failed is None:
            assert elapsed < budget_s, (
                f"{name} overran its runtime budget: {elapsed:.1f}s >= {budget_s:.0f}s")


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("acceptance gates")
        for line in GATE_LINES:
            terminalreporter.write_line(line)
