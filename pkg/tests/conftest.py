import os
from pathlib import Path

import numpy as np
import pytest

import synthetic
from ctslice.data import load_dataset

UCI_ENV = "CTSLICE_DATA"


def uci_path() -> Path | None:
    path = os.environ.get(UCI_ENV)
    return Path(path) if path and Path(path).is_file() else None


@pytest.fixture(scope="session")
def uci_dataset():
    path = uci_path()
    if path is None:
        pytest.skip(f"set {UCI_ENV} to slice_localization_data.csv to run full-data checks")
    return load_dataset(path)


@pytest.fixture(scope="session")
def small_dataset():
    return synthetic.make_dataset(n_patients=12, seed=0)


@pytest.fixture(scope="session")
def synthetic_csv(tmp_path_factory, small_dataset):
    path = tmp_path_factory.mktemp("data") / "slices.csv"
    synthetic.write_csv(small_dataset, path)
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion at the end of the run
# --------------------------------------------------------------------------

_CRITERIA: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


@pytest.fixture
def record(request):
    """Attach a one-line measurement to the criterion being tested."""
    def _record(detail: str):
        request.node.user_properties.append(("detail", detail))
    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        details = [v for k, v in item.user_properties if k == "detail"]
        if rep.skipped:
            status = "SKIP"
            reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
            details.append(reason.removeprefix("Skipped: "))
        else:
            status = "PASS" if rep.passed else "FAIL"
        _CRITERIA[item.nodeid] = [marker.args[0], status, "; ".join(details)]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_CRITERIA.values(), key=lambda r: _criterion_key(r[0])):
        terminalreporter.write_line(f"{status:<4}  {label}: {detail}")


def _criterion_key(label: str):
    head = label.split()[0].rstrip(".")
    digits = "".join(ch for ch in head if ch.isdigit())
    return (int(digits) if digits else 99, label)
