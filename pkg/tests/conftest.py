import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _clean_tape():
    from advbreak import tensor as T

    T.current_tape().clear()
    yield
    T.current_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk():
    """Desk-scale data and models, trained once and cached on disk."""
    from advbreak import zoo

    return zoo


@pytest.fixture(scope="session")
def desk_data(desk):
    return desk.desk_data()


@pytest.fixture(scope="session")
def unsecured(desk):
    return desk.classifier("unsecured")


@pytest.fixture(scope="session")
def tiny_data():
    from advbreak.digits import synthetic_digits

    return synthetic_digits(400, seed=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
