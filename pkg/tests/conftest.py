import numpy as np
import pytest

from lsmgp import data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def wine():
    datasets = pytest.importorskip("sklearn.datasets")
    X, y = datasets.load_wine(return_X_y=True)
    return data.LabeledDataset(X, y, (1, 2, 3))


def wine_split(ds, seed):
    tr, te = data.train_test_split(ds, 1 / 3, seed)
    tr = data.normalize(tr)
    return tr, data.normalize(te, tr.stats)


ACCEPTANCE_LINES = []


def acceptance(number, ok, detail):
    """Record and print one PASS/FAIL line, then assert the criterion."""
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
