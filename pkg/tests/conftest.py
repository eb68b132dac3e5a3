import numpy as np
import pytest

from sftdg.domains import generate_toy


@pytest.fixture(scope="session")
def toy():
    return generate_toy(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria register their verdicts here; printed after the run.
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(f"{key}: {ACCEPTANCE[key]}")
