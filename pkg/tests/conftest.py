import numpy as np
import pytest

from oim.synth import SynthConfig, generate
from oim.types import ProposalSet


def make_ps(boxes, features=None, scores=None, labels=(1,), image_id="img"):
    boxes = np.asarray(boxes, dtype=np.float64)
    n = len(boxes)
    if features is None:
        features = np.zeros((n, 2))
    features = np.asarray(features, dtype=np.float64).reshape(n, -1)
    labels = np.asarray(labels, dtype=np.int64)
    if scores is None:
        scores = np.zeros((n, len(labels) + 1))
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim == 1:
        # single foreground class column
        scores = np.column_stack([np.zeros(n), scores])
    return ProposalSet(image_id, boxes, features, scores, labels, width=100.0, height=100.0)


@pytest.fixture(scope="session")
def small_synth():
    return generate(SynthConfig(seed=3, num_images=12))


ACCEPTANCE_RESULTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
