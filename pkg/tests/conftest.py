import os

import pytest

from persistheap.constants import GiB, MiB
from persistheap.manager import Manager, ManagerOptions

# keep reservations modest so many heaps can coexist in one test process
os.environ.setdefault("PERSISTHEAP_RESERVATION", str(4 * GiB))


@pytest.fixture
def opts():
    return ManagerOptions(reservation=1 * GiB, file_size=64 * MiB)


@pytest.fixture
def store(tmp_path):
    return str(tmp_path / "store")


@pytest.fixture
def heap(store, opts):
    mgr = Manager.create(store, opts)
    yield mgr
    if not mgr.closed:
        mgr.close()


_acceptance = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.skipped and rep.when == "setup"):
        detail = dict(item.user_properties).get("detail", "")
        if rep.passed:
            status = "PASS"
        elif rep.skipped:
            status = "SKIP"
            detail = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        else:
            status = "FAIL"
            detail = detail or rep.longreprtext.strip().splitlines()[-1]
        _acceptance.append((marker.args[0], status, item.name, detail))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n, status, name, detail in sorted(_acceptance):
        terminalreporter.write_line(f"criterion {n}: {status}  {name}  {detail}")
