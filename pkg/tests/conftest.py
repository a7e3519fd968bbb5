import os
from pathlib import Path

import hypothesis
import pytest

from edgehub.config import HubConfig, SimClock
from edgehub.hub import Hub

hypothesis.settings.register_profile("ci", max_examples=300, deadline=None)
hypothesis.settings.register_profile("dev", max_examples=50, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "dev"))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def make_hub(tmp_path):
    """Factory for started hubs on a simulated clock in a fresh log dir."""
    hubs = []

    def make(start=1_000, clock=None, **config):
        config.setdefault("interval_ms", 10_000)
        log_dir = config.pop("log_dir", tmp_path / f"hub{len(hubs)}")
        clock = clock or SimClock(start)
        hub = Hub(HubConfig(log_dir, **config), clock=clock).start()
        hubs.append(hub)
        return hub

    yield make
    for hub in hubs:
        try:
            hub.close()
        except Exception:
            pass


# -- acceptance summary: one PASS/FAIL line per criterion ------------------
# Tests carry ``@pytest.mark.acceptance(<number>, <title>)``; a criterion
# passes only if every test marked with its number passed.

_acceptance: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when != "call" and report.passed:
        return
    number, title = marker.args
    entry = _acceptance.setdefault(number, {"title": title, "status": "PASS", "details": []})
    if report.failed:
        entry["status"] = "FAIL"
    elif report.skipped and entry["status"] == "PASS":
        entry["status"] = "SKIP"
    if report.when == "call":
        detail = dict(item.user_properties).get("detail")
        if detail:
            entry["details"].append(detail)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        e = _acceptance[number]
        line = f"{e['status']} {number}. {e['title']}"
        if e["details"]:
            line += " [" + "; ".join(e["details"]) + "]"
        terminalreporter.write_line(line)
