import logging
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tcavlab.concepts import SplitRatios, generate_leaf_dataset, split_dataset
from tcavlab.diffmodel import TrainConfig, reference_model, train_classifier


@pytest.fixture(autouse=True)
def _quiet_cav_warnings():
    logging.getLogger("tcavlab").setLevel(logging.ERROR)
    yield
    logging.getLogger("tcavlab").setLevel(logging.NOTSET)


@pytest.fixture(scope="session")
def leaf_splits():
    ds = generate_leaf_dataset(150, (32, 32), seed=11)
    return ds, split_dataset(ds, SplitRatios(), seed=1)


@pytest.fixture(scope="session")
def trained_leaf_model(leaf_splits):
    """Reference model trained on the synthetic leaf dataset (about 10 s)."""
    ds, (train, val, test) = leaf_splits
    model, trace = train_classifier(reference_model(2, seed=3), train.samples, val.samples, TrainConfig(seed=4))
    return model, trace


@pytest.fixture(scope="session")
def small_model():
    return reference_model(2, (8, 8, 3), seed=0, conv_filters=(2, 3), hidden=6)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number, title, ok, detail=""):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
