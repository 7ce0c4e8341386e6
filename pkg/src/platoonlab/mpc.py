"""Outer-loop offset-free MPC.

Each control step solves two small QPs on the data-based internal model:

1. a steady-state target (x_bar, u_bar) consistent with the current lumped
   disturbance estimate, and
2. a receding-horizon problem over corrections c(0..N-1) with a Riccati
   terminal weight, the rear-AV safety box and |c(j) + K x(j)| <= u_max.

The applied command is u = K x + c*(0).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space
from sklearn.base import BaseEstimator

from .dynamics import rear_selector
from .exceptions import Infeasible, NumericalFailure
from .numerics import QPProblem, dare, solve_qp
from .observer import InternalModel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConstraintSets:
    """|u| <= u_max and |C x| <= x_max with x_max = (h_max, v_max, u_max)."""

    u_max: float = 4.0
    h_tilde_max: float = 20.0
    v_tilde_max: float = 10.0

    def __post_init__(self):
        if min(self.u_max, self.h_tilde_max, self.v_tilde_max) <= 0:
            raise ValueError("constraint bounds must be positive")

    @property
    def x_max(self) -> np.ndarray:
        return np.array([self.h_tilde_max, self.v_tilde_max, self.u_max])

    def selector(self, n_x: int) -> np.ndarray:
        return rear_selector(n_x // 3)


@dataclass
class MPCConfig:
    N: int = 2
    Q: np.ndarray | float = 10.0
    R: float = 1.0
    Q_bar: np.ndarray | float = 1e3
    R_bar: float = 0.0
    sets: ConstraintSets = field(default_factory=ConstraintSets)
    output_penalty: float = 1e6
    P_terminal: np.ndarray | None = None

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("horizon N must be >= 1")
        if self.R <= 0 or self.R_bar < 0:
            raise ValueError("need R > 0 and R_bar >= 0")

    def weights(self, n_x: int):
        Q = self.Q * np.eye(n_x) if np.isscalar(self.Q) else np.asarray(self.Q, dtype=float)
        Qb = self.Q_bar * np.eye(n_x) if np.isscalar(self.Q_bar) else np.asarray(self.Q_bar, dtype=float)
        if np.linalg.eigvalsh(Q)[0] < -1e-12 or np.linalg.eigvalsh(Qb)[0] <= 0:
            raise ValueError("need Q >= 0 and Q_bar > 0")
        return Q, Qb

    def with_terminal(self, model: InternalModel) -> "MPCConfig":
        Q, _ = self.weights(model.n_x)
        self.P_terminal = dare(model.A_bar, model.B, Q, np.atleast_2d(self.R))
        return self


@dataclass(frozen=True)
class SteadyStateTarget:
    x_bar: np.ndarray
    u_bar: float
    exact: bool = True
    fallback: bool = False


def target_equations(model: InternalModel, d_hat, C):
    """E [x_bar; u_bar] = e for the steady-state equalities."""
    n_x = model.n_x
    E = np.block([
        [np.eye(n_x) - model.A_bar, -model.B],
        [C, np.zeros((C.shape[0], model.B.shape[1]))],
    ])
    e = np.concatenate([model.B_d @ d_hat, -(C @ model.C_d) @ d_hat])
    return E, e


def solve_steady_state_target(model: InternalModel, d_hat, cfg: MPCConfig, tol: float = 1e-6) -> SteadyStateTarget:
    """Steady-state target for the current disturbance estimate.

    The equalities are 3 + n_x equations in n_x + 1 unknowns, so for a
    generic d_hat they have no exact solution. When they are consistent the
    exact equality-constrained QP is solved; otherwise the equilibrium rows
    are kept hard and the output rows become a heavily weighted least-squares
    term. If even that is infeasible the target falls back to the origin.
    """
    d_hat = np.asarray(d_hat, dtype=float).ravel()
    n_x = model.n_x
    if d_hat.size != model.n_w:
        raise ValueError(f"d_hat must have {model.n_w} entries")
    if not np.any(d_hat):
        return SteadyStateTarget(np.zeros(n_x), 0.0)
    sets = cfg.sets
    C = sets.selector(n_x)
    _, Qb = cfg.weights(n_x)
    E, e = target_equations(model, d_hat, C)
    H = np.zeros((n_x + 1, n_x + 1))
    H[:n_x, :n_x] = 2 * Qb
    H[n_x, n_x] = 2 * cfg.R_bar
    f = np.zeros(n_x + 1)
    A_in = np.block([[C, np.zeros((3, 1))], [np.zeros((1, n_x)), np.ones((1, 1))]])
    hi = np.concatenate([sets.x_max, [sets.u_max]])

    z_ls = np.linalg.lstsq(E, e, rcond=None)[0]
    consistent = np.max(np.abs(E @ z_ls - e)) <= tol * max(1.0, np.max(np.abs(e)))
    try:
        if consistent:
            z = solve_qp(QPProblem(H, f, E, e, A_in, -hi, hi)).x
        else:
            z = _penalized_target(E[:n_x], e[:n_x], E[n_x:], e[n_x:], H, A_in, hi, cfg.output_penalty, tol)
    except (Infeasible, NumericalFailure) as exc:
        log.debug("steady-state target problem failed (%s); using the origin", exc)
        return SteadyStateTarget(np.zeros(n_x), 0.0, exact=False, fallback=True)
    return SteadyStateTarget(z[:n_x], float(z[n_x]), exact=bool(consistent))


def _penalized_target(E1, e1, Eo, eo, H, A_in, hi, penalty, tol):
    """Equilibrium rows hard, output rows as a weighted least-squares term.

    The equilibrium rows are eliminated through z = z0 + N t (N spans their
    null space), which leaves a tiny QP in t that stays well conditioned
    even with a large output penalty.
    """
    z0 = np.linalg.lstsq(E1, e1, rcond=None)[0]
    if np.max(np.abs(E1 @ z0 - e1)) > tol * max(1.0, np.max(np.abs(e1))):
        raise Infeasible("equilibrium equations have no solution")
    Nz = null_space(E1)
    if Nz.shape[1] == 0:
        z = z0
    else:
        H2 = H + 2 * penalty * Eo.T @ Eo
        f2 = -2 * penalty * Eo.T @ eo
        Ht = Nz.T @ H2 @ Nz
        ft = Nz.T @ (H2 @ z0 + f2)
        At = A_in @ Nz
        r0 = A_in @ z0
        res = solve_qp(QPProblem(0.5 * (Ht + Ht.T), ft, A_in=At, lb=-hi - r0, ub=hi - r0))
        z = z0 + Nz @ res.x
    if np.any(np.abs(A_in @ z) > hi + 1e-6):
        raise Infeasible("no steady state inside the constraint sets")
    return z


@dataclass
class MPCSolution:
    c: np.ndarray
    status: str
    iterations: int
    solve_time: float
    cost: float
    x_pred: np.ndarray


class _Condensed:
    """Prediction matrices x(j) = F_j + Gamma_j c for j = 0..N."""

    def __init__(self, model: InternalModel, N: int):
        n_x = model.n_x
        A, B, Bd = model.A_bar, model.B[:, 0], model.B_d
        self.N = N
        self.Apow = [np.eye(n_x)]
        for _ in range(N):
            self.Apow.append(A @ self.Apow[-1])
        self.Gamma = np.zeros((N + 1, n_x, N))
        for j in range(1, N + 1):
            for i in range(j):
                self.Gamma[j, :, i] = self.Apow[j - 1 - i] @ B
        self.A, self.Bd, self.t_s = A, Bd, model.t_s

    def free_response(self, x0, w1, w2) -> np.ndarray:
        F = np.zeros((self.N + 1, x0.size))
        F[0] = x0
        for j in range(1, self.N + 1):
            wj = w1 + (j - 1) * self.t_s * w2
            F[j] = self.A @ F[j - 1] + self.Bd @ wj
        return F


def mpc_qp(xi_hat, target: SteadyStateTarget, K, model: InternalModel, cfg: MPCConfig,
           x_meas=None, cond: _Condensed | None = None):
    """Build the condensed QP; returns (QPProblem, F, Gamma, constant cost)."""
    n_x, n_w = model.n_x, model.n_w
    N = cfg.N
    cond = cond or _Condensed(model, N)
    x0 = np.asarray(xi_hat[:n_x], dtype=float)
    w1 = np.asarray(xi_hat[n_x:n_x + n_w], dtype=float)
    w2 = np.asarray(xi_hat[n_x + n_w:n_x + 2 * n_w], dtype=float)
    F = cond.free_response(x0, w1, w2)
    Gm = cond.Gamma
    Q, _ = cfg.weights(n_x)
    if cfg.P_terminal is None:
        cfg.with_terminal(model)
    P = cfg.P_terminal
    xb, ub = target.x_bar, target.u_bar
    H = 2 * cfg.R * np.eye(N)
    f = -2 * cfg.R * ub * np.ones(N)
    const = (F[0] - xb) @ Q @ (F[0] - xb) + N * cfg.R * ub ** 2
    for j in range(1, N + 1):
        W = P if j == N else Q
        H += 2 * Gm[j].T @ W @ Gm[j]
        f += 2 * Gm[j].T @ W @ (F[j] - xb)
        const += (F[j] - xb) @ W @ (F[j] - xb)

    sets = cfg.sets
    C = sets.selector(n_x)
    K = np.asarray(K, dtype=float).ravel()
    rows, lo, hi = [], [], []
    for j in range(1, N + 1):
        rows.append(C @ Gm[j])
        lo.append(-sets.x_max - C @ F[j])
        hi.append(sets.x_max - C @ F[j])
    for j in range(N):
        xj = F[j] if (j > 0 or x_meas is None) else np.asarray(x_meas, dtype=float)
        row = np.zeros(N)
        row[j] = 1.0
        row = row + (K @ Gm[j] if j > 0 else 0.0)
        rows.append(row[None, :])
        lo.append(np.array([-sets.u_max - K @ xj]))
        hi.append(np.array([sets.u_max - K @ xj]))
    qp = QPProblem(0.5 * (H + H.T), f, A_in=np.vstack(rows), lb=np.concatenate(lo), ub=np.concatenate(hi))
    return qp, F, Gm, const


def solve_mpc(xi_hat, target: SteadyStateTarget, K, model: InternalModel, cfg: MPCConfig,
              x_meas=None, cond: _Condensed | None = None) -> MPCSolution:
    """Optimal correction sequence; ``x_meas`` (if given) replaces the model
    state in the first input constraint so that the applied K x + c(0) is the
    quantity being bounded.

    Raises:
        Infeasible: the initial state already violates the safety box or the
            QP has no feasible point.
    """
    n_x = model.n_x
    C = cfg.sets.selector(n_x)
    x0 = np.asarray(xi_hat[:n_x])
    if np.any(np.abs(C @ x0) > cfg.sets.x_max + 1e-6):
        raise Infeasible("initial predicted state violates the safety box")
    qp, F, Gm, const = mpc_qp(xi_hat, target, K, model, cfg, x_meas, cond)
    res = solve_qp(qp)
    c = res.x
    x_pred = F + np.einsum("jnk,k->jn", Gm, c)
    cost = 0.5 * c @ qp.H @ c + qp.f @ c + const
    return MPCSolution(c, res.status, res.iterations, res.solve_time, float(cost), x_pred)


def mpc_cost(c, xi_hat, target, model, cfg) -> float:
    """J_N evaluated by forward simulation (independent of the condensed form)."""
    n_x, n_w = model.n_x, model.n_w
    Q, _ = cfg.weights(n_x)
    x = np.asarray(xi_hat[:n_x], dtype=float)
    w1 = np.asarray(xi_hat[n_x:n_x + n_w], dtype=float)
    w2 = np.asarray(xi_hat[n_x + n_w:], dtype=float)
    J = 0.0
    for j in range(cfg.N):
        J += (x - target.x_bar) @ Q @ (x - target.x_bar) + cfg.R * (c[j] - target.u_bar) ** 2
        x = model.A_bar @ x + model.B[:, 0] * c[j] + model.B_d @ w1
        w1 = w1 + model.t_s * w2
    return float(J + (x - target.x_bar) @ cfg.P_terminal @ (x - target.x_bar))


def dual_loop_control(x, u_hat, K, sets: ConstraintSets, tripwire: list | None = None) -> float:
    """u = K x + u_hat, hard-clamped to the input box."""
    u = float(np.asarray(K).ravel() @ np.asarray(x).ravel() + u_hat)
    if abs(u) > sets.u_max + 1e-6:
        log.info("dual-loop command %.4f exceeds u_max; clamping", u)
        if tripwire is not None:
            tripwire.append(u)
    return float(np.clip(u, -sets.u_max, sets.u_max))


def mpc_fallback(previous: np.ndarray | None, K, x, sets: ConstraintSets) -> float:
    """Next element of the previous optimal sequence, else zero."""
    if previous is not None and len(previous) > 1:
        c = float(previous[1])
        if abs(c + float(np.asarray(K).ravel() @ np.asarray(x).ravel())) <= sets.u_max + 1e-9:
            return c
    return 0.0


class OffsetFreeMPC(BaseEstimator):
    """Outer-loop controller: ``fit`` on an internal model, ``predict`` u_hat.

    ``predict(xi_hat, K, x_meas)`` runs the target problem and the MPC for
    one step, falling back to the shifted previous plan (or zero) when
    either solve fails. Solver telemetry of the last call is kept in
    ``last_info_``.
    """

    def __init__(self, N=2, Q=10.0, R=1.0, Q_bar=1e3, R_bar=0.0, u_max=4.0,
                 h_tilde_max=20.0, v_tilde_max=10.0, output_penalty=1e6):
        self.N = N
        self.Q = Q
        self.R = R
        self.Q_bar = Q_bar
        self.R_bar = R_bar
        self.u_max = u_max
        self.h_tilde_max = h_tilde_max
        self.v_tilde_max = v_tilde_max
        self.output_penalty = output_penalty

    def fit(self, model: InternalModel, y=None):
        sets = ConstraintSets(self.u_max, self.h_tilde_max, self.v_tilde_max)
        self.config_ = MPCConfig(self.N, self.Q, self.R, self.Q_bar, self.R_bar, sets,
                                 self.output_penalty).with_terminal(model)
        self.model_ = model
        self._cond = _Condensed(model, self.N)
        self._previous = None
        self.last_info_ = {}
        self.target_fallbacks_ = 0
        return self

    def predict(self, xi_hat, K, x_meas=None) -> float:
        t0 = time.perf_counter()
        model, cfg = self.model_, self.config_
        n_x, n_w = model.n_x, model.n_w
        d_hat = np.asarray(xi_hat)[n_x:n_x + n_w]
        target = solve_steady_state_target(model, d_hat, cfg)
        if target.fallback:
            if self.target_fallbacks_ == 0:
                log.warning("steady-state target infeasible for d_hat=%s; using the origin "
                            "(further occurrences are counted, not logged)", np.round(d_hat, 6))
            self.target_fallbacks_ += 1
        info = {"target_fallback": target.fallback, "target_exact": target.exact,
                "x_bar": target.x_bar, "u_bar": target.u_bar}
        try:
            sol = solve_mpc(xi_hat, target, K, model, cfg, x_meas, self._cond)
            self._previous = sol.c
            u_hat = float(sol.c[0])
            info.update(status=sol.status, iterations=sol.iterations, fallback=False)
        except (Infeasible, NumericalFailure) as exc:
            x_ref = xi_hat[:n_x] if x_meas is None else x_meas
            u_hat = mpc_fallback(self._previous, K, x_ref, cfg.sets)
            self._previous = None
            info.update(status=f"fallback: {exc}", iterations=0, fallback=True)
        info["solve_time"] = time.perf_counter() - t0
        self.last_info_ = info
        return u_hat
