import numpy as np
import pytest

from compsvrg.problems import FunctionalProblem, make_mean_variance, make_quadcomp, make_toy_nonlinear


def identity_half_norm(dim=2):
    """G = identity (m = 1), F_1(y) = |y|^2 / 2, so f(x) = |x|^2 / 2."""
    return FunctionalProblem(
        [lambda x: np.asarray(x, dtype=float)],
        [lambda x: np.eye(dim)],
        [lambda y: 0.5 * float(y @ y)],
        [lambda y: np.asarray(y, dtype=float)],
        dim_x=dim, dim_y=dim,
    )


@pytest.fixture
def tiny():
    """n = m = 2, N = 1, r = (1, 3): f(x) = -2x + x^2, x* = 1, f* = -1."""
    return make_mean_variance([[1.0], [3.0]])


@pytest.fixture
def toy():
    return make_toy_nonlinear()


@pytest.fixture
def quad():
    return make_quadcomp(m=4, n=3, dim_x=3, dim_y=4, seed=7)


@pytest.fixture
def small_mv():
    rng = np.random.default_rng(3)
    return make_mean_variance(np.abs(rng.standard_normal((12, 4))))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
