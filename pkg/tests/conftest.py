import os
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from mcnet.synthetic import write_dataset  # noqa: E402

_ACCEPTANCE = []


def pytest_configure(config):
    torch.set_num_threads(1)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MCNET_SLOW"):
        return
    skip = pytest.mark.skip(reason="set MCNET_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        detail = ""
        if report.skipped and isinstance(report.longrepr, tuple):
            detail = f" ({report.longrepr[2]})"
        _ACCEPTANCE.append(f"{status}  {marker.args[0]}{detail}")


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    return write_dataset(tmp_path_factory.mktemp("synthetic"), 6, size=64, seed=3)
