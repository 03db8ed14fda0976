import re

import numpy as np
import pytest
import torch

from reconscan.data_pipeline import Label, Volume


@pytest.fixture(autouse=True)
def _single_thread():
    # keep torch deterministic and cheap across the suite
    torch.set_num_threads(1)


@pytest.fixture
def healthy_volume():
    def make(shape=(32, 32, 32), seed=0, subject="subj-a", scan="scan-a0"):
        rng = np.random.default_rng(seed)
        return Volume(
            voxels=rng.random(shape, dtype=np.float32),
            subject_id=subject,
            scan_id=scan,
            label=Label.HEALTHY,
        )

    return make


_ACCEPTANCE_LINES: list[str] = []


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    match = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    status = "PASS" if report.passed else "FAIL"
    _ACCEPTANCE_LINES.append(f"criterion {int(match.group(1)):2d}: {status}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
