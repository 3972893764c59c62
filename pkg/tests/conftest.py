from __future__ import annotations

import time
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> [title, outcomes]
_criteria: dict[int, list] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria.setdefault(number, [title, []])


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    mark = next((m for m in report.keywords if m == "criterion"), None)
    if mark is None:
        return
    number = getattr(report, "criterion_number", None)
    if number is not None:
        _criteria[number][1].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report.criterion_number = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, outcomes = _criteria[number]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        else:
            status = "SKIPPED"
        terminalreporter.write_line(f"criterion {number} [{status}] {title}")


@pytest.fixture(scope="session")
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def synthetic_records():
    """Snippet records of the committed 40-contract synthetic corpus."""
    from reentra.corpus import load_manifest
    from reentra.preproc import snippet_records

    records = []
    for rec in load_manifest(FIXTURES / "synthetic" / "manifest.jsonl"):
        records.extend(snippet_records(rec.id, rec.source, rec.label))
    return records


@pytest.fixture(scope="session")
def overfit_detector(synthetic_records):
    """Default hyperparameters with 200 epochs on the synthetic corpus, plus its wall time."""
    from reentra.trainer import Hyperparams, fit

    start = time.perf_counter()
    detector = fit(synthetic_records, Hyperparams(epochs=200))
    return detector, time.perf_counter() - start
