import numpy as np
import pytest

from greenprocure.dual import Evaluation
from greenprocure.hjb import GridSpec
from greenprocure.market import synthetic_scenario


@pytest.fixture(scope="session")
def base_inputs():
    return synthetic_scenario("base", 0)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(4, 4, 4)


class FunctionOracle:
    """Dual-oracle stand-in backed by an explicit concave function and its gradient."""

    def __init__(self, fun, grad):
        self.fun, self.grad = fun, grad
        self.calls = 0
        self.n_solves = 0

    def __call__(self, amplitudes):
        x = np.atleast_1d(np.asarray(amplitudes, dtype=float))
        self.calls += 1
        g = np.atleast_1d(np.asarray(self.grad(x), dtype=float))
        g_proj = g.copy()
        g_proj[(x <= 0) & (g < 0)] = 0.0
        return Evaluation(x, float(self.fun(x)), 0.0, g, np.zeros_like(g),
                          float(np.linalg.norm(g_proj) / np.sqrt(g.size)))

    def field_for(self, amplitudes):
        return None


@pytest.fixture
def function_oracle():
    return FunctionOracle


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
