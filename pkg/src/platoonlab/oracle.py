"""Ground-truth linearised error model.

This module reads the *true* HV parameters and therefore belongs to the
test/verification side only. Nothing on the controller path (data, inner
loop, observer, MPC, harness, CLI) may import it; a test enforces that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import (
    PlatoonScenario,
    desired_velocity_gradient,
    disturbance_matrix,
    input_matrix,
    setpoint_gap,
)


@dataclass
class LinearErrorModel:
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    A_c: np.ndarray
    t_s: float

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_w(self) -> int:
        return self.D.shape[1]

    def step(self, x, u, w):
        return self.A @ x + self.B @ np.atleast_1d(u) + self.D @ np.asarray(w)


def build_true_error_model(scenario: PlatoonScenario, v_star: float | None = None) -> LinearErrorModel:
    """Continuous blocks A_i, E_i assembled and Euler-discretised."""
    v_star = scenario.v_star if v_star is None else v_star
    h_star = setpoint_gap(v_star, scenario.policy)
    n = scenario.n
    t_s = scenario.t_s
    A_c = np.zeros((3 * n, 3 * n))
    for i in range(1, n + 1):
        par = scenario.vehicles[i]
        r = 3 * (i - 1)
        blk = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, 1.0], [0.0, 0.0, -1.0 / par.tau]])
        E = np.zeros((3, 3))
        E[0, 1] = 1.0
        if i < n:
            a_bar = par.alpha * desired_velocity_gradient(h_star, scenario.policy)
            b_bar = par.alpha + par.beta
            blk[2, 0] = a_bar / par.tau
            blk[2, 1] = -b_bar / par.tau
            E[2, 1] = par.beta / par.tau
        A_c[r:r + 3, r:r + 3] = blk
        if i > 1:
            A_c[r:r + 3, r - 3:r] = E
    A = np.eye(3 * n) + t_s * A_c
    B = input_matrix(n, scenario.vehicles[-1].tau, t_s)
    D = disturbance_matrix(n, t_s)
    return LinearErrorModel(A=A, B=B, D=D, A_c=A_c, t_s=t_s)


def physical_disturbance(scenario: PlatoonScenario, v0: float, v_star: float) -> np.ndarray:
    """w = (v0 - v*, beta_1 (v0 - v*) / tau_1) for a given leader speed."""
    hv1 = scenario.vehicles[1]
    w1 = v0 - v_star
    return np.array([w1, hv1.beta * w1 / hv1.tau])


def simulate_linear(model: LinearErrorModel, x0, controller, W, steps: int):
    """Roll the linear oracle forward; ``controller(k, x)`` returns u(k).

    ``W`` is either a constant 2-vector or an (steps, 2) array.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = np.tile(W, (steps, 1))
    X = np.empty((steps + 1, model.n_x))
    U = np.empty(steps)
    X[0] = x0
    for k in range(steps):
        U[k] = controller(k, X[k])
        X[k + 1] = model.step(X[k], U[k], W[k])
    return X, U, W
