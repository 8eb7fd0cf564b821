import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> list of (test name, passed, details)
_CRITERIA = {}
N_CRITERIA = 9


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        details = [str(v) for k, v in item.user_properties if k == "detail"]
        _CRITERIA.setdefault(marker.args[0], []).append((item.name, rep.passed, details))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        entries = _CRITERIA.get(n)
        if not entries:
            tr.write_line(f"criterion {n}: NOT RUN")
            continue
        status = "PASS" if all(ok for _, ok, _ in entries) else "FAIL"
        details = "; ".join(d for _, _, ds in entries for d in ds)
        tr.write_line(f"criterion {n}: {status}" + (f" | {details}" if details else ""))
