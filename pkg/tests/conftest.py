import numpy as np
import pytest
import torch

from singleclass.data import make_shapes
from singleclass.models import TrainConfig, train_classifier

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by the acceptance module
ACCEPTANCE_RESULTS = {}


@pytest.fixture
def record_criterion():
    def record(number, title, passed, detail=""):
        ACCEPTANCE_RESULTS[number] = (title, bool(passed), detail)
        line = f"CRITERION {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        title, ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"CRITERION {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}")


@pytest.fixture(scope="session")
def tiny_data():
    kw = dict(size=16, num_categories=4)
    return make_shapes(40, 0, "train", **kw), make_shapes(10, 0, "test", **kw)


@pytest.fixture(scope="session")
def tiny_clf(tiny_data):
    train, test = tiny_data
    return train_classifier(train, TrainConfig(epochs=3, batch_size=16), heldout=test)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
