import os
from pathlib import Path

import pytest

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def cache_dir(tmp_path_factory):
    """Surrogate cache shared by the session; PCMSEG_CACHE keeps it across sessions."""
    env = os.environ.get("PCMSEG_CACHE")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return env
    return str(tmp_path_factory.mktemp("surrogates"))


@pytest.fixture
def record():
    def _record(name, passed, detail):
        line = f"{name} {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE[name] = line
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    ran = {rep.nodeid.split("::")[-1].split("_")[1].upper()
           for key in ("passed", "failed", "error")
           for rep in terminalreporter.stats.get(key, [])
           if "test_acceptance.py::test_ac" in rep.nodeid}
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ran, key=lambda k: int(k[2:])):
        terminalreporter.write_line(ACCEPTANCE.get(key, f"{key} FAIL: test errored before a result"))
