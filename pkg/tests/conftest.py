import numpy as np
import pytest

from tsguard import training as tr
from tsguard.data import generate_synthetic, prepare
from tsguard.networks import ClassifierArch, DenoiserArch, ForecasterArch


@pytest.fixture(scope="session")
def tiny_splits():
    """Three stations, two training weeks and one test week."""
    return prepare(generate_synthetic(n_stations=3, n_weeks=3, seed=21), train_weeks=2, test_weeks=1)


@pytest.fixture(scope="session")
def tiny_components(tiny_splits):
    """Briefly trained F1, F2, C and D sharing one adversarial pool at radius 0.3."""
    train, _ = tiny_splits
    hp = lambda c: tr.HyperParams.defaults(c, epochs=4)
    f1 = tr.train_f1(train, ForecasterArch(hidden=8), hp("f1"))
    pool = tr.build_pool(f1, train, 0.3, seed=0)
    return {
        "f1": f1,
        "f2": tr.train_f2(train, f1, ForecasterArch(hidden=8), hp("f2"), pool=pool),
        "classifier": tr.train_classifier(train, f1, ClassifierArch(blocks=1, channels=4),
                                          hp("classifier"), eps_c=0.3, pool=pool),
        "denoiser": tr.train_denoiser(train, f1, DenoiserArch(), hp("denoiser"), pool=pool),
    }


def constant_classifier(value):
    return lambda X: np.full(len(X), value, dtype=np.int64)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
