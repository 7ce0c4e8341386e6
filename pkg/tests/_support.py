"""Shared helpers for the test suite (data generation on the linear oracle)."""

from __future__ import annotations

import numpy as np

from platoonlab.data_engine import DataLog, add_excitation
from platoonlab.dynamics import default_scenario, platoon_errors
from platoonlab.oracle import build_true_error_model, simulate_linear


def rear_feedback(x) -> float:
    """ACC-like linear law on the rear AV's error block (gap, closing speed, speed)."""
    return float(np.clip(0.23 * x[-3] + 0.07 * (x[-5] - x[-2]) - 0.3 * x[-2], -4.0, 4.0))


def linear_collection(T: int = 500, delta: float = 1e-3, amplitude: float = 0.1, seed: int = 0,
                      scenario=None):
    """Data from the linear error model with a known disturbance record.

    Returns (log, W0, model) where W0 is 2 x T with entries in [-delta, delta].
    """
    scenario = scenario or default_scenario()
    model = build_true_error_model(scenario)
    rng = np.random.default_rng(seed)
    W = rng.uniform(-delta, delta, (T, 2))
    x0 = platoon_errors(scenario.initial_states, scenario.v_star, scenario.policy, scenario.d_safe)

    def ctrl(k, x):
        return add_excitation(rear_feedback(x), k, amplitude, scenario.u_max)

    X, U, _ = simulate_linear(model, x0, ctrl, W, T)
    log = DataLog.from_matrices(U[None, :], X[:-1].T, X[1:].T, t_s=scenario.t_s)
    return log, W.T, model
