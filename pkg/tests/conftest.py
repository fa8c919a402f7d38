import numpy as np
import pytest

from gdmopt.diffusion import TrainConfig, train
from gdmopt.oracle import generate_dataset, load_dataset
from gdmopt.problems import get_problem

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """Tiny MSR3 and CO train/test splits shared by unit tests."""
    root = tmp_path_factory.mktemp("data")
    out = {}
    for name, n_train in (("MSR3", 400), ("CO", 400)):
        spec = get_problem(name)
        generate_dataset(spec, n_train, 11, root / f"{name}_train")
        generate_dataset(spec, 40, 12, root / f"{name}_test")
        out[name] = (load_dataset(root / f"{name}_train"), load_dataset(root / f"{name}_test"))
    return out


@pytest.fixture(scope="session")
def tiny_model(small_data):
    train_data, _ = small_data["MSR3"]
    return train(train_data, TrainConfig(epochs=5, seed=3))
