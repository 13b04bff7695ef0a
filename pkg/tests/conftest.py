import math
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from entrobridge import DiscreteMeasure, SolverConfig, build_problem

settings.register_profile(
    "default", max_examples=100, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# Values computed with mpmath at 40 significant digits.
E = math.e
GAMMA11 = 0.3655292893150024396
GAMMA12 = 0.1344707106849975604
OT_SYM = 0.3798854930417224754  # log(2 / (1 + e^-1))
TRANSPORT_SYM = 0.2689414213699951207
ENTROPY_SYM = 0.1109440716717273546
DUAL_SYM = -0.6201145069582775246
U_SYM = 0.1899427465208612377
LAMBDA_01 = 0.6201145069582775246  # log((1 + e) / 2)
LSE_EXAMPLE = 0.8279889392428697494  # log(0.25 + 0.75 e)


def random_measure(rng, n, floor=0.05):
    return DiscreteMeasure.from_weights(rng.random(n) + floor)


def random_problem(rng, shape, eps=0.5, cost_scale=1.0, **cfg):
    measures = [random_measure(rng, n) for n in shape]
    cost = rng.random(shape) * cost_scale
    return build_problem(measures, cost, SolverConfig(eps, **cfg))


def symmetric_problem(eps=1.0, **cfg):
    r = DiscreteMeasure.uniform(2)
    return build_problem([r, r], [[0.0, 1.0], [1.0, 0.0]], SolverConfig(eps, **cfg))


def pairwise_cost(points):
    N = len(points)
    c = np.zeros(tuple(len(p) for p in points))
    for i in range(N):
        for j in range(i + 1, N):
            si = [1] * N
            sj = [1] * N
            si[i] = len(points[i])
            sj[j] = len(points[j])
            c = c + 0.5 * (np.reshape(points[i], si) - np.reshape(points[j], sj)) ** 2
    return c


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
