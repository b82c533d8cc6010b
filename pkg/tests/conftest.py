import numpy as np
import pytest

from panelmean.model import PanelBinaryDataset, SubjectRecord


def make_dataset(rows, names=()):
    """``rows`` = list of (times, indicators, covariates)."""
    return PanelBinaryDataset(
        tuple(SubjectRecord(i, t, b, x) for i, (t, b, x) in enumerate(rows)), tuple(names)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record and print a one-line PASS/FAIL verdict, then assert it."""
    lines = request.config.stash.setdefault(_CRITERIA, [])

    def verdict(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (
            f"  [{detail}]" if detail else "")
        lines.append(line)
        print(line)
        assert ok, line

    return verdict


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
