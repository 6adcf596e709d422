import itertools
import sys

import numpy as np
import pytest


def naive_basis(x, k, i, t, last_interval):
    """Textbook recursive Cox-de Boor, independent of the vectorised code.

    ``x == t[-1]`` is assigned to knot interval ``last_interval``.
    """
    if k == 0:
        if t[i] <= x < t[i + 1]:
            return 1.0
        return 1.0 if (x == t[-1] and i == last_interval) else 0.0
    c1 = 0.0
    if t[i + k] != t[i]:
        c1 = (x - t[i]) / (t[i + k] - t[i]) * naive_basis(x, k - 1, i, t, last_interval)
    c2 = 0.0
    if t[i + k + 1] != t[i + 1]:
        c2 = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * naive_basis(x, k - 1, i + 1, t, last_interval)
    return c1 + c2


def naive_values(spec, x):
    return np.array([naive_basis(x, spec.order, i, spec.knots, spec.count - 1) for i in range(spec.count)])


def nested_sum(coeffs, axes, point):
    vals = [naive_values(a, p) for a, p in zip(axes, point)]
    total = 0.0
    for idx in itertools.product(*(range(a.count) for a in axes)):
        w = coeffs[idx]
        for k, i in enumerate(idx):
            w *= vals[k][i]
        total += w
    return total


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[n])
