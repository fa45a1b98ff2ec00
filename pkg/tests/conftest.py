import numpy as np
import pytest

from denoising_markov.generator import RateMatrix


def random_rate_matrix(rng, n, density=1.0, scale=1.0):
    off = rng.uniform(0.1, 1.0, size=(n, n)) * scale
    if density < 1.0:
        off *= rng.random((n, n)) < density
    return RateMatrix.from_off_diagonal(off)


def random_density(rng, n, floor=0.05):
    p = rng.uniform(floor, 1.0, size=n)
    return p / p.sum()


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
