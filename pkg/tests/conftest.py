from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from recam.data import load_recam_jsonl

settings.register_profile("recam", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("recam")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def sample_split():
    """The worked example instance (Abenomics question, gold option 3)."""
    return load_recam_jsonl(FIXTURES / "sample_instance.jsonl", name="trial")


@pytest.fixture
def sample_instance(sample_split):
    return sample_split[0]


# -- per-criterion acceptance summary ------------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion a test verifies")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        entry = _CRITERIA.setdefault(marker.args[0], {"outcomes": [], "details": []})
        entry["outcomes"].append(report.outcome)
        entry["details"].extend(v for k, v in item.user_properties if k == "detail")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, entry in _CRITERIA.items():
        outcomes = entry["outcomes"]
        if "failed" in outcomes:
            status = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            status = "SKIP"
        else:
            status = "PASS"
        detail = " | ".join(dict.fromkeys(entry["details"]))
        terminalreporter.write_line(f"{status}  {name}" + (f": {detail}" if detail else ""))
