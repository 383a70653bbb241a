"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from upldg.nn import NetworkSpec, ParamSet, init_params

# Central-difference step and the relative-error denominator floor for gradient checks.
FD_STEP = 1e-5
FD_FLOOR = 1e-6


def random_network(seed: int, input_dim=2, hidden=(4,), num_classes=3, p=0.5):
    spec = NetworkSpec(input_dim, hidden, num_classes, p)
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    # non-zero biases so every parameter gets exercised
    for k in params:
        if k.endswith(".bias"):
            params[k] = rng.normal(0.0, 0.3, size=params[k].shape)
    return spec, params


def fd_gradient(loss_fn, params: ParamSet, h: float = FD_STEP) -> ParamSet:
    """Central finite differences of ``loss_fn(params)`` for every entry."""
    out = ParamSet()
    for name, value in params.items():
        g = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus, minus = params.copy(), params.copy()
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
        out[name] = g
    return out


def max_rel_error(analytic: ParamSet, numeric: ParamSet, floor: float = FD_FLOOR) -> float:
    worst = 0.0
    for name in analytic:
        a, n = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


@pytest.fixture
def tiny_net():
    return random_network(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
