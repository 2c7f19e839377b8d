import time

import pytest

from drift_adapt.model import build_model
from drift_adapt.synth import make_dataset
from drift_adapt.train import TrainConfig, train_source


@pytest.fixture(scope="session")
def dataset():
    return make_dataset(0)


@pytest.fixture(scope="session")
def source(dataset):
    """Default-config source model trained once per session: (model, log, seconds)."""
    start = time.perf_counter()
    model, log = train_source(dataset["train"], build_model(dataset.num_classes, seed=0), TrainConfig(),
                              eval_sets={"val": dataset["val"], "test": dataset["test"]})
    return model, log, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
