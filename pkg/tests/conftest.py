import os
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
ARTIFACTS = Path(os.environ.get("GMCOPT_ARTIFACTS", ROOT / "artifacts"))

ACCEPTANCE_LINES = []
PROPERTY_RESULTS = {"collected": 0, "failed": [], "duration_s": 0.0}


def _is_acceptance(nodeid):
    return "test_acceptance.py" in nodeid


def pytest_collection_modifyitems(session, config, items):
    # acceptance last, so criterion 9 can read the property-suite outcomes of this session
    items.sort(key=lambda it: _is_acceptance(it.nodeid))
    PROPERTY_RESULTS["collected"] = sum(not _is_acceptance(it.nodeid) for it in items)


def pytest_runtest_logreport(report):
    if _is_acceptance(report.nodeid):
        return
    PROPERTY_RESULTS["duration_s"] += report.duration
    if report.failed:
        PROPERTY_RESULTS["failed"].append(report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
