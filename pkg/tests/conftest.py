from __future__ import annotations

import pytest

_RESULTS = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line per acceptance criterion.

    The line is printed immediately (visible with ``-s``) and repeated in the
    terminal summary so it survives output capture.
    """
    results = request.config.stash.setdefault(_RESULTS, [])

    def record(criterion: int, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
        print(line, flush=True)
        results.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
