"""Augmented internal model and the unknown-input style observer.

The internal model stacks the data-based closed loop x+ = A_bar x + B u_hat
with a second-order disturbance model (w1 ramps with slope w2):

    xi = [x; w1; w2],  A_xi = [[A_bar, B_d, 0], [0, I, t_s I], [0, 0, I]]
    y  = [I, C_d, 0] xi

The observer is z+ = N z + G u_hat + L y,  xi_hat = z + H y.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import DetectabilityWarning, Infeasible
from .numerics import LMIProblem, pbh_detectability, solve_lmi, spectral_radius

log = logging.getLogger(__name__)


def default_disturbance_maps(n_x: int, n_w: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """B_d = ones; C_d = first row [0, 1] followed by rows of ones."""
    B_d = np.ones((n_x, n_w))
    C_d = np.ones((n_x, n_w))
    C_d[0, 0] = 0.0
    return B_d, C_d


def structured_disturbance_maps(n_x: int, t_s: float) -> tuple[np.ndarray, np.ndarray]:
    """Alternative pair: disturbances act on every acceleration row.

    Only used when explicitly requested (``--disturbance-maps structured``).
    """
    B_d = np.zeros((n_x, 2))
    B_d[2::3, 0] = t_s
    B_d[0, 1] = t_s
    C_d = np.zeros((n_x, 2))
    C_d[0::3, 1] = 1.0
    C_d[1::3, 0] = 1.0
    return B_d, C_d


@dataclass
class InternalModel:
    A_bar: np.ndarray
    A_xi: np.ndarray
    B_xi: np.ndarray
    C_xi: np.ndarray
    B: np.ndarray
    B_d: np.ndarray
    C_d: np.ndarray
    t_s: float
    detectable: bool = True

    @property
    def n_x(self) -> int:
        return self.A_bar.shape[0]

    @property
    def n_w(self) -> int:
        return self.B_d.shape[1]

    @property
    def n_xi(self) -> int:
        return self.A_xi.shape[0]


def augment(A_bar, B, B_d, C_d, t_s) -> InternalModel:
    A_bar = np.asarray(A_bar, dtype=float)
    B = np.asarray(B, dtype=float).reshape(A_bar.shape[0], -1)
    B_d = np.asarray(B_d, dtype=float)
    C_d = np.asarray(C_d, dtype=float)
    n_x, n_w = B_d.shape
    if A_bar.shape != (n_x, n_x) or C_d.shape != (n_x, n_w):
        raise ValueError("B_d and C_d must both be n_x x n_w")
    I, Z = np.eye(n_w), np.zeros((n_w, n_w))
    A_xi = np.block([
        [A_bar, B_d, np.zeros((n_x, n_w))],
        [np.zeros((n_w, n_x)), I, t_s * I],
        [np.zeros((n_w, n_x)), Z, I],
    ])
    B_xi = np.vstack([B, np.zeros((2 * n_w, B.shape[1]))])
    C_xi = np.hstack([np.eye(n_x), C_d, np.zeros((n_x, n_w))])
    detectable = pbh_detectability(A_xi, C_xi)
    return InternalModel(A_bar, A_xi, B_xi, C_xi, B, B_d, C_d, t_s, detectable)


def build_internal_model(log_, gain, B, B_d=None, C_d=None, t_s=None) -> InternalModel:
    """A_bar = X1 G from the data log and inner-loop solution, then augment."""
    A_bar = log_.X1 @ gain.G
    if B_d is None or C_d is None:
        B_d, C_d = default_disturbance_maps(A_bar.shape[0])
    model = augment(A_bar, B, B_d, C_d, log_.t_s if t_s is None else t_s)
    if not model.detectable:
        warnings.warn(
            "augmented internal model fails the PBH detectability test; "
            "observer synthesis may be infeasible", DetectabilityWarning, stacklevel=2,
        )
    return model


@dataclass
class ObserverGains:
    N_xi: np.ndarray
    G_xi: np.ndarray
    L: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    H_xi: np.ndarray
    Phi: np.ndarray
    P_o: np.ndarray
    epsilon_o: float
    solve_time: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def error_matrix(self) -> np.ndarray:
        return self.N_xi  # equals Phi A_xi - L1 C_xi by construction

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("N_xi", "G_xi", "L", "H_xi")} | {
            "epsilon_o": self.epsilon_o
        }


def observer_residuals(model: InternalModel, g: ObserverGains) -> dict:
    """Max-abs residuals of the three structural matrix equations."""
    return {
        "N": float(np.max(np.abs(g.Phi @ model.A_xi - g.N_xi - g.L1 @ model.C_xi))),
        "G": float(np.max(np.abs(g.Phi @ model.B_xi - g.G_xi))),
        "L2": float(np.max(np.abs(g.N_xi @ g.H_xi - g.L2))),
        "L": float(np.max(np.abs(g.L1 + g.L2 - g.L))),
    }


def verify_observer_lmi(model: InternalModel, g: ObserverGains) -> float:
    """Minimum eigenvalue of the observer LMI rebuilt from the gains."""
    P = g.P_o
    Omega = P @ (g.Phi @ model.A_xi - g.L1 @ model.C_xi)
    M = np.block([[P - g.epsilon_o * np.eye(P.shape[0]), Omega.T], [Omega, P]])
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def synthesize_observer(model: InternalModel, pole_radius: float | None = None) -> ObserverGains:
    """Solve the observer SDP and back-substitute for N, G, L2 and L.

    P_o is normalised by P_o <= I so that maximising epsilon_o (then <= 1)
    maximises the certified contraction rather than just the scale of P_o.
    ``pole_radius`` optionally adds a disk constraint on the error dynamics.
    """
    A, C = model.A_xi, model.C_xi
    n, p = A.shape[0], C.shape[0]
    prob = LMIProblem()
    P = prob.symmetric("P_o", n)
    Hb = prob.matrix("H_bar", (n, p))
    L1b = prob.matrix("L1_bar", (n, p))
    eps = prob.scalar("epsilon_o")
    Omega = P @ A - Hb @ (C @ A) - L1b @ C
    prob.psd(P, strict=True, name="P_o")
    prob.psd(np.eye(n) - P, name="normalisation")
    prob.psd(cp.bmat([[P - eps * np.eye(n), Omega.T], [Omega, P]]), strict=True, name="decay")
    if pole_radius is not None:
        r = float(pole_radius)
        prob.psd(cp.bmat([[r * P, Omega.T], [Omega, r * P]]), strict=True, name="pole_disk")
    prob.bound(eps >= 1e-6)
    prob.maximize(eps)
    try:
        sol = solve_lmi(prob)
    except Infeasible as exc:
        raise Infeasible(
            "observer SDP infeasible: choose different disturbance maps (B_d, C_d)",
            exc.diagnostics,
        ) from exc
    P_o = 0.5 * (sol["P_o"] + sol["P_o"].T)
    H = np.linalg.solve(P_o, sol["H_bar"])
    L1 = np.linalg.solve(P_o, sol["L1_bar"])
    Phi = np.eye(n) - H @ C
    N = Phi @ A - L1 @ C
    G = Phi @ model.B_xi
    L2 = N @ H
    gains = ObserverGains(N, G, L1 + L2, L1, L2, H, Phi, P_o, float(sol["epsilon_o"]),
                          solve_time=sol.solve_time)
    gains.diagnostics["rho"] = spectral_radius(N)
    gains.diagnostics["phi_cond"] = float(np.linalg.cond(Phi))
    if gains.diagnostics["phi_cond"] > 1e12:
        log.warning("Phi = I - H C is (nearly) singular; PD-Luenberger form unavailable")
    return gains


@dataclass
class ObserverState:
    z: np.ndarray
    xi_hat: np.ndarray


def observer_init(gains: ObserverGains, y0, n_w: int = 2) -> ObserverState:
    """z(0) = Phi [y0; 0; 0] so that xi_hat(0) = [y0; 0; 0]."""
    xi0 = np.concatenate([np.asarray(y0, dtype=float), np.zeros(2 * n_w)])
    z0 = gains.Phi @ xi0
    return ObserverState(z0, z0 + gains.H_xi @ np.asarray(y0, dtype=float))


def observer_measure(state: ObserverState, gains: ObserverGains, y) -> ObserverState:
    """Measurement update: xi_hat(k) = z(k) + H y(k)."""
    return ObserverState(state.z, state.z + gains.H_xi @ np.asarray(y, dtype=float))


def observer_step(state: ObserverState, gains: ObserverGains, u_hat, y) -> ObserverState:
    """Time update z(k+1) = N z(k) + G u_hat(k) + L y(k).

    The returned ``xi_hat`` still belongs to step k; call
    :func:`observer_measure` with y(k+1) before reading the next estimate.
    """
    y = np.asarray(y, dtype=float)
    z_next = gains.N_xi @ state.z + gains.G_xi @ np.atleast_1d(u_hat) + gains.L @ y
    return ObserverState(z_next, state.xi_hat)


def split_estimate(xi_hat, n_x: int, n_w: int = 2):
    return xi_hat[:n_x], xi_hat[n_x:n_x + n_w], xi_hat[n_x + n_w:]


def lumped_disturbance_estimate(state: ObserverState, n_x: int, n_w: int = 2) -> np.ndarray:
    """d_hat is the w1 block of the estimate (w2 is only its slope)."""
    return state.xi_hat[n_x:n_x + n_w].copy()


def pd_luenberger_step(xi_hat, model: InternalModel, gains: ObserverGains, u_hat, y, y_next):
    """One step of the equivalent proportional-derivative Luenberger form.

    xi+ = A_xi xi + B_xi u + Phi^-1 L1 e_y(k) + Phi^-1 H e_y(k+1), where
    e_y(k+1) = y(k+1) - C_xi xi+ makes the update implicit in xi+; it is
    solved here as a linear system. Requires Phi to be invertible.
    """
    e_y = np.asarray(y) - model.C_xi @ xi_hat
    pred = model.A_xi @ xi_hat + model.B_xi @ np.atleast_1d(u_hat)
    PhiL1 = np.linalg.solve(gains.Phi, gains.L1)
    PhiH = np.linalg.solve(gains.Phi, gains.H_xi)
    lhs = np.eye(len(xi_hat)) + PhiH @ model.C_xi
    return np.linalg.solve(lhs, pred + PhiL1 @ e_y + PhiH @ np.asarray(y_next))


class DisturbanceObserver(BaseEstimator):
    """Estimator-style wrapper around the observer synthesis and recursion.

    ``fit(model)`` synthesises the gains; ``transform(Y, U)`` runs the
    observer over a measurement record and returns the estimates xi_hat(k).
    """

    def __init__(self, pole_radius=None):
        self.pole_radius = pole_radius

    def fit(self, model: InternalModel, y=None):
        self.model_ = model
        self.gains_ = synthesize_observer(model, self.pole_radius)
        return self

    def transform(self, Y, U=None):
        check_is_fitted(self, "gains_")
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        U = np.zeros(len(Y)) if U is None else np.asarray(U, dtype=float).ravel()
        st = observer_init(self.gains_, Y[0], self.model_.n_w)
        out = np.empty((len(Y), self.model_.n_xi))
        for k, y in enumerate(Y):
            st = observer_measure(st, self.gains_, y)
            out[k] = st.xi_hat
            st = observer_step(st, self.gains_, U[k], y)
        return out
