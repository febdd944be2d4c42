import numpy as np
import pytest

from gradalign.datahub import make_moons_2d, make_synthetic_digits, train_test_split
from gradalign.netzoo import mini_lenet, mlp
from gradalign.trainer import RunConfig, train

DESK_TRAIN = dict(epochs=10, batch_size=32, lr=3e-3, milestones=(7,))


@pytest.fixture(scope="session")
def digits():
    ds = make_synthetic_digits(1200, seed=0)
    return train_test_split(ds, 0.25, seed=0)


@pytest.fixture(scope="session")
def trained_ce_cnn(digits):
    tr, te = digits
    net, _ = train(mini_lenet(seed=0), tr, RunConfig(**DESK_TRAIN), te)
    return net


@pytest.fixture(scope="session")
def moons():
    return train_test_split(make_moons_2d(400, 0.1, seed=0), 0.25, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_mlp():
    return mlp(5, [7, 6], 3, activation="softplus", beta=3.0, seed=3)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
