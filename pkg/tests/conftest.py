import copy
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from opsec.netsim import build, run  # noqa: E402
from opsec.scenario import default_scenario  # noqa: E402


def isp(isp_id=1, **kw):
    d = {"isp_id": isp_id, "coverage": "both", "catalog": ["ids", "url-filter"], "theta": 30}
    d.update(kw)
    return d


def scenario(**kw) -> dict:
    """Default scenario with section-wise overrides (dicts merge one level deep)."""
    d = copy.deepcopy(default_scenario())
    for k, v in kw.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k] = {**d[k], **v}
        else:
            d[k] = v
    return d


def simulate(**kw):
    return run(build(scenario(**kw)))


@pytest.fixture
def honest():
    return simulate()


# -- acceptance reporting: one line per criterion, whatever the outcome

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    rep = (yield).get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when not in ("setup", "call"):
        return
    n, title = mark.args
    if rep.failed or rep.when == "call":
        msg = ""
        if rep.failed:
            msg = str(rep.longrepr.reprcrash.message).splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else ""
        _CRITERIA[n] = (rep.passed, title, msg, getattr(rep, "duration", 0.0))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, msg, dur = _CRITERIA[n]
        line = f"C{n:<2} {'PASS' if ok else 'FAIL'}  {title}  ({dur:.1f}s)"
        terminalreporter.write_line(line + (f"  -- {msg}" if msg else ""))
