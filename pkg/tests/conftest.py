import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

# property suites run at least a thousand cases each, deterministically
settings.register_profile(
    "thorough",
    max_examples=1000,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.filter_too_much, HealthCheck.data_too_large],
)
settings.register_profile("quick", max_examples=50, deadline=None, derandomize=True)
settings.load_profile(os.environ.get("PWADMPC_HYPOTHESIS_PROFILE", "thorough"))

CONFIGS = Path(__file__).resolve().parents[1] / "src" / "pwadmpc" / "configs"


@pytest.fixture(scope="session")
def configs():
    return CONFIGS


@pytest.fixture(scope="session")
def weak():
    from pwadmpc.model import load_network

    return load_network(CONFIGS / "weakcoupling.json")


@pytest.fixture(scope="session")
def strong():
    from pwadmpc.model import load_network

    return load_network(CONFIGS / "strongcoupling.json")


# ---------------------------------------------------------------- acceptance report plumbing

# nodeid -> [valid examples, outcome] for every property test run in this session
PROPERTY_RUNS: dict[str, list] = {}
# lines printed in the terminal summary, one per acceptance criterion
ACCEPTANCE_LINES: list[str] = []


def pytest_collection_modifyitems(session, config, items):
    # the acceptance module summarizes the property suites, so it runs last
    items.sort(key=lambda item: "test_acceptance.py" in item.nodeid)


@pytest.hookimpl(hookwrapper=True, trylast=True)
def pytest_runtest_call(item):
    if not getattr(item.obj, "is_hypothesis_test", False):
        yield
        return
    from hypothesis.statistics import collector

    outer = collector.value

    def count(stats):
        valid = sum(1 for phase in ("explicit-phase", "reuse-phase", "generate-phase")
                    for case in stats.get(phase, {}).get("test-cases", []) if case["status"] == "valid")
        PROPERTY_RUNS.setdefault(item.nodeid, [0, None])[0] = valid
        if outer is not None:
            outer(stats)

    with collector.with_value(count):
        yield


def pytest_runtest_logreport(report):
    if report.when == "call" and report.nodeid in PROPERTY_RUNS:
        PROPERTY_RUNS[report.nodeid][1] = report.outcome


def pytest_sessionfinish(session, exitstatus):
    path = os.environ.get("PWADMPC_PROPERTY_REPORT")
    if path:
        import json

        Path(path).write_text(json.dumps(PROPERTY_RUNS, indent=1, sort_keys=True))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
