import sys

import numpy as np
import pytest

from kgrefine.store import from_labeled_triples


@pytest.fixture
def obama_store():
    return from_labeled_triples(
        [
            ("Barack_Obama", "isMarriedTo", "Michel_Obama"),
            ("Barack_Obama", "bornIn", "Honolulu"),
            ("Michel_Obama", "bornIn", "Chicago"),
            ("Honolulu", "locatedIn", "USA"),
            ("Chicago", "locatedIn", "USA"),
        ],
        test=[("Michel_Obama", "isMarriedTo", "Barack_Obama")],
    )


@pytest.fixture
def overlap_store():
    # head/tail overlaps counted by hand in test_sampling
    return from_labeled_triples(
        [
            ("x1", "A", "y1"), ("x2", "A", "y2"), ("x3", "A", "y3"), ("x4", "A", "y4"),
            ("x1", "B", "z1"), ("x2", "B", "z2"),
            ("w1", "C", "y1"), ("w2", "C", "v1"),
        ]
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.RESULTS:
        terminalreporter.write_line(line)
