"""Data-driven inner-loop state feedback.

The gain comes from an SDP built purely from collected data (U0, X0, X1):
find P > 0, Y and a decay margin gamma with X0 Y = P and a block LMI that
certifies Schur stability of X1 G - D W0 G for every disturbance record W0
whose columns are bounded by delta. Then G = Y P^-1 and K = U0 G.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from scipy.linalg import null_space
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data_engine import DataLog, validate_log
from .exceptions import Infeasible, NumericalFailure, RankDeficient
from .numerics import STRICT_MARGIN, LMIProblem, numerical_rank, solve_lmi

log = logging.getLogger(__name__)

EPSILON_GRID = (1.0, 0.1, 10.0, 0.01, 100.0)


@dataclass(frozen=True)
class DisturbanceBound:
    delta: float
    delta1: float
    delta2: float
    beta1_upper: float
    tau1_lower: float


def compute_delta(u_max: float, t_s: float, beta1_upper: float = 0.5, tau1_lower: float = 0.1) -> DisturbanceBound:
    """Componentwise bound on w from actuator limits and HV-1 parameter bounds."""
    if min(u_max, t_s, tau1_lower) <= 0 or beta1_upper < 0:
        raise ValueError("u_max, t_s, tau1_lower must be positive and beta1_upper non-negative")
    d1 = u_max * t_s
    d2 = beta1_upper * d1 / tau1_lower
    return DisturbanceBound(max(d1, d2), d1, d2, beta1_upper, tau1_lower)


@dataclass
class InnerLoopGain:
    K: np.ndarray
    P: np.ndarray
    Y: np.ndarray
    gamma: float
    epsilon: float
    G: np.ndarray
    delta: float
    solve_time: float = 0.0
    data_digest: str = ""
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "K": self.K.tolist(),
            "P": self.P.tolist(),
            "gamma": self.gamma,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "data_digest": self.data_digest,
        }


def _row_space_basis(*mats, tol_rank=True) -> np.ndarray:
    S = np.vstack(mats)
    _, s, Vt = np.linalg.svd(S, full_matrices=False)
    r = numerical_rank(S) if tol_rank else int(np.sum(s > 0))
    return Vt[:r].T


P_BOUND = 100.0


def whitening(X0: np.ndarray):
    """T with T X0 having orthonormal rows, its inverse and the singular values of X0."""
    U, S, _ = np.linalg.svd(X0, full_matrices=False)
    return (U / S).T, U * S, S


def lmi_scale(D: np.ndarray, delta: float, T: int, epsilon: float) -> tuple[float, float]:
    """(s, sigma) with sigma = delta sqrt(T) ||D|| and s = epsilon sigma^2."""
    sigma = delta * math.sqrt(T) * float(np.linalg.norm(D, 2))
    if sigma <= 0:
        sigma = 1.0
    return epsilon * sigma ** 2, sigma


def _build_problem(X0, X1, U0, D, delta: float, gamma_cap_scaled: float, p_bound: float = P_BOUND):
    """Assemble the reduced, normalised SDP on (whitened) data.

    Y is restricted to the row space of [X0; X1; U0] (any component outside
    it only adds to Y'Y in the Schur term), and the equality X0 Y = P is
    eliminated by the affine parametrisation Y = V (M P + N W). This shrinks
    the T x T identity block to r x r with r <= 2 n_x + n_u.

    With (P, Y, gamma) = s (P~, Y~, gamma~) and s = epsilon sigma^2, the
    congruence diag(I/sqrt(s), I/sqrt(s), I/sqrt(epsilon), sqrt(epsilon) I)
    turns the decay LMI into

        [[P~ - gamma~ I, Y~'X1', sigma Y~', 0],
         [X1 Y~,          P~,     0,         D Delta / sigma],
         [sigma Y~,       0,      I,         0],
         [0,              *,      0,         I]]

    so epsilon only fixes the scale and every block is O(1). The feasible
    set is a cone in (P, Y, gamma, epsilon); P~ <= p_bound I picks one ray.
    """
    n_x, T = X0.shape
    n_w = D.shape[1]
    _, sigma = lmi_scale(D, delta, T, 1.0)
    V = _row_space_basis(X0, X1, U0)
    r = V.shape[1]
    X0V = X0 @ V
    M = np.linalg.pinv(X0V)
    N = null_space(X0V)

    prob = LMIProblem()
    P = prob.symmetric("P", n_x)
    gamma = prob.scalar("gamma")
    Z = M @ P
    if N.shape[1]:
        W = prob.matrix("W", (N.shape[1], n_x))
        Z = Z + N @ W
    X1V = X1 @ V
    DDelta = D @ (delta * math.sqrt(T) * np.eye(n_w)) / sigma
    I_x = np.eye(n_x)
    blk = cp.bmat([
        [P - gamma * I_x, (X1V @ Z).T, sigma * Z.T, np.zeros((n_x, n_w))],
        [X1V @ Z, P, np.zeros((n_x, r)), DDelta],
        [sigma * Z, np.zeros((r, n_x)), np.eye(r), np.zeros((r, n_w))],
        [np.zeros((n_w, n_x)), DDelta.T, np.zeros((n_w, r)), np.eye(n_w)],
    ])
    prob.psd(P, strict=True, name="P")
    prob.psd(p_bound * I_x - P, name="normalisation")
    prob.psd(blk, strict=True, name="decay")
    prob.bound(gamma >= STRICT_MARGIN)
    prob.bound(gamma <= gamma_cap_scaled)
    prob.maximize(gamma)
    return prob, V, M, N


def inner_lmi_blocks(X1, Y, P, gamma, D, delta, epsilon) -> np.ndarray:
    """Full-size decay LMI matrix, assembled directly from its definition."""
    n_x, T = X1.shape[0], Y.shape[0]
    n_w = D.shape[1]
    DDelta = D @ (delta * np.sqrt(T) * np.eye(n_w))
    top = np.hstack([P - gamma * np.eye(n_x), Y.T @ X1.T, Y.T, np.zeros((n_x, n_w))])
    mid = np.hstack([X1 @ Y, P, np.zeros((n_x, T)), DDelta])
    low = np.hstack([Y, np.zeros((T, n_x)), epsilon * np.eye(T), np.zeros((T, n_w))])
    bot = np.hstack([np.zeros((n_w, n_x)), DDelta.T, np.zeros((n_w, T)), np.eye(n_w) / epsilon])
    return np.vstack([top, mid, low, bot])


def verify_inner_gain(log_: DataLog, D, gain: InnerLoopGain) -> dict:
    """Re-check every constraint with numpy only; returns the raw margins."""
    X0, X1 = log_.X0, log_.X1
    big = inner_lmi_blocks(X1, gain.Y, gain.P, gain.gamma, D, gain.delta, gain.epsilon)
    big = 0.5 * (big + big.T)
    return {
        "lmi_min_eig": float(np.linalg.eigvalsh(big)[0]),
        "P_min_eig": float(np.linalg.eigvalsh(gain.P)[0]),
        "gamma": float(gain.gamma),
        "equality_residual": float(np.max(np.abs(X0 @ gain.Y - gain.P))),
        "X0G_residual": float(np.max(np.abs(X0 @ gain.G - np.eye(X0.shape[0])))),
        "K_residual": float(np.max(np.abs(log_.U0 @ gain.G - gain.K))),
    }


def synthesize_inner(
    log_: DataLog,
    D: np.ndarray,
    bound: DisturbanceBound | float,
    epsilon: float | None = 1.0,
    gamma_cap: float = 1.0,
    epsilon_grid=EPSILON_GRID,
    p_bound: float = P_BOUND,
) -> InnerLoopGain:
    """Solve the data-based SDP for the inner-loop gain K.

    The SDP is solved in whitened coordinates (T X0 has orthonormal rows)
    and mapped back by congruence, which leaves every constraint intact but
    removes the conditioning of X0 from the solver's view. The returned
    (P, Y, gamma) satisfy the original LMI; ``verify_inner_gain`` checks it.

    ``epsilon=None`` walks ``epsilon_grid`` until a feasible point is found;
    a number tries that value first and then the rest of the grid.

    Raises:
        RankDeficient: X0 is not full row rank.
        Infeasible: no epsilon on the grid gives a feasible SDP.
    """
    rank, ok = validate_log(log_)
    if not ok:
        raise RankDeficient(f"X0 has numerical rank {rank} < n_x = {log_.n_x} (T = {log_.T})")
    delta = bound.delta if isinstance(bound, DisturbanceBound) else float(bound)
    if not delta > 0:
        raise ValueError("delta must be positive")
    D = np.asarray(D, dtype=float)
    U0, X0, X1 = log_.U0, log_.X0, log_.X1
    Tw, Tinv, S = whitening(X0)
    X0w, X1w, Dw = Tw @ X0, Tw @ X1, Tw @ D
    candidates = list(epsilon_grid) if epsilon is None else [epsilon] + [e for e in epsilon_grid if e != epsilon]
    failures = {}
    for eps in candidates:
        scale, _ = lmi_scale(Dw, delta, log_.T, eps)
        # gamma in original units is scale * gamma~ * S_min^2
        cap = gamma_cap / (scale * S[-1] ** 2)
        prob, V, M, N = _build_problem(X0w, X1w, U0, Dw, delta, cap, p_bound)
        try:
            sol = solve_lmi(prob)
        except (Infeasible, NumericalFailure) as exc:
            failures[eps] = str(exc)
            log.info("inner-loop SDP failed at epsilon=%g: %s", eps, exc)
            continue
        Pt = 0.5 * (sol["P"] + sol["P"].T)
        Zt = M @ Pt + (N @ sol["W"] if N.shape[1] else 0.0)
        G = V @ Zt @ np.linalg.solve(Pt, Tw)
        P = scale * Tinv @ Pt @ Tinv.T
        P = 0.5 * (P + P.T)
        Y = scale * V @ Zt @ Tinv.T
        return InnerLoopGain(
            K=U0 @ G, P=P, Y=Y, gamma=scale * float(sol["gamma"]) * S[-1] ** 2, epsilon=eps,
            G=G, delta=delta, solve_time=sol.solve_time, data_digest=log_.digest(),
            diagnostics={"failures": failures, "min_eigs": sol.min_eigs, "scale": scale,
                         "x0_singular_values": (float(S[0]), float(S[-1]))},
        )
    raise Infeasible(
        "inner-loop SDP infeasible for every epsilon tried; more data (larger T) or a "
        "smaller disturbance bound may help",
        {"failures": failures, "delta": delta},
    )


def feasibility_boundary(log_: DataLog, D, delta_hi: float, epsilon=None, iters: int = 12) -> float:
    """Largest delta (by bisection on [0, delta_hi]) for which synthesis succeeds.

    Diagnostic only; never used to relax the bound silently.
    """
    lo, hi = 0.0, delta_hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        try:
            synthesize_inner(log_, D, mid, epsilon=epsilon)
            lo = mid
        except Infeasible:
            hi = mid
    return lo


def closed_loop_data_matrix(log_: DataLog, D, W0, gain: InnerLoopGain) -> np.ndarray:
    """X1 G - D W0 G (needs the true disturbance record, so tests only)."""
    return log_.X1 @ gain.G - np.asarray(D) @ np.asarray(W0) @ gain.G


def inner_control(K, x) -> float:
    return float((np.asarray(K).reshape(1, -1) @ np.asarray(x).ravel())[0])


class DataDrivenStateFeedback(BaseEstimator):
    """Estimator-style wrapper: ``fit`` on data matrices, ``predict`` u = K x.

    Parameters:
        delta: disturbance bound; ``None`` derives it from ``u_max``/``t_s``
            and the HV-1 parameter bounds.
        epsilon: scalar in the decay LMI (``None`` searches the default grid).
        gamma_cap: upper cap on the maximised decay margin.
    """

    def __init__(self, delta=None, epsilon=1.0, gamma_cap=1.0, u_max=4.0, t_s=0.05,
                 beta1_upper=0.5, tau1_lower=0.1):
        self.delta = delta
        self.epsilon = epsilon
        self.gamma_cap = gamma_cap
        self.u_max = u_max
        self.t_s = t_s
        self.beta1_upper = beta1_upper
        self.tau1_lower = tau1_lower

    def fit(self, X0, X1, U0, D=None):
        """Fit on column-wise data (X0, X1: n_x x T; U0: n_u x T)."""
        X0 = check_array(X0)
        X1 = check_array(X1)
        U0 = check_array(np.atleast_2d(U0))
        n_x = X0.shape[0]
        if D is None:
            from .dynamics import disturbance_matrix

            D = disturbance_matrix(n_x // 3, self.t_s)
        bound = (
            compute_delta(self.u_max, self.t_s, self.beta1_upper, self.tau1_lower)
            if self.delta is None else self.delta
        )
        data = DataLog.from_matrices(U0, X0, X1, t_s=self.t_s)
        self.gain_ = synthesize_inner(data, D, bound, self.epsilon, self.gamma_cap)
        self.K_ = self.gain_.K
        self.P_ = self.gain_.P
        self.gamma_ = self.gain_.gamma
        self.n_features_in_ = n_x
        return self

    def predict(self, X):
        """u = K x for each row of ``X`` (n_samples x n_x)."""
        check_is_fitted(self, "K_")
        X = check_array(X, ensure_2d=False)
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X @ self.K_.ravel()
