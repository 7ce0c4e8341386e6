"""Numerical building blocks: SDP/QP front ends, Riccati, spectra and ranks.

The SDP front end is a thin declarative layer over cvxpy (solved with
Clarabel); the QP front end wraps OSQP with solution polishing. Both check
their own answers before returning them, and callers that need stronger
guarantees re-verify with plain numpy.
"""

from __future__ import annotations

import contextlib
import io
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import cvxpy as cp
import numpy as np
import osqp
import scipy.sparse as sparse

from .exceptions import Infeasible, NumericalFailure

RANK_SAFETY = 1e3
STRICT_MARGIN = 1e-6


def default_tol(base: float) -> float:
    """Tolerance override hook (``PLATOONLAB_SOLVER_TOL``)."""
    env = os.environ.get("PLATOONLAB_SOLVER_TOL")
    return float(env) if env else base


# ---------------------------------------------------------------------------
# Linear algebra helpers
# ---------------------------------------------------------------------------

def rank_threshold(M: np.ndarray, s: np.ndarray | None = None) -> float:
    if s is None:
        s = np.linalg.svd(M, compute_uv=False)
    smax = s[0] if s.size else 0.0
    return smax * max(M.shape) * np.finfo(float).eps * RANK_SAFETY


def numerical_rank(M) -> int:
    M = np.atleast_2d(np.asarray(M))
    M = M.astype(complex if np.iscomplexobj(M) else float)
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(s > rank_threshold(M, s)))


def spectral_radius(M) -> float:
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("spectral_radius needs a square matrix")
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def _clustered_eigenvalues(A: np.ndarray, tol: float = 1e-6) -> list[complex]:
    # Defective eigenvalues come back perturbed by ~sqrt(eps); the cluster mean
    # is accurate to roundoff, which the PBH rank test needs.
    lam = list(np.linalg.eigvals(A))
    clusters: list[list[complex]] = []
    for z in sorted(lam, key=lambda c: (c.real, c.imag)):
        for cl in clusters:
            if abs(np.mean(cl) - z) < tol:
                cl.append(z)
                break
        else:
            clusters.append([z])
    return [complex(np.mean(cl)) for cl in clusters]


def pbh_detectability(A_xi, C_xi, criterion: str = "discrete") -> bool:
    """PBH test: rank [lam I - A; C] = n at every non-stable eigenvalue.

    ``criterion="discrete"`` checks eigenvalues with |lam| >= 1 (Schur sense);
    ``criterion="continuous"`` checks Re(lam) >= 0 instead.
    """
    A = np.asarray(A_xi, dtype=float)
    C = np.atleast_2d(np.asarray(C_xi, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or C.shape[1] != n:
        raise ValueError("inconsistent dimensions for the PBH test")
    for lam in _clustered_eigenvalues(A):
        if criterion == "discrete":
            unstable = abs(lam) >= 1.0 - 1e-9
        elif criterion == "continuous":
            unstable = lam.real >= 0.0
        else:
            raise ValueError(f"unknown criterion {criterion!r}")
        if not unstable:
            continue
        M = np.vstack([lam * np.eye(n) - A, C.astype(complex)])
        if numerical_rank(M) < n:
            return False
    return True


def dare(A, B, Q, R, max_iter: int = 10_000, tol: float = 1e-12, residual_tol: float = 1e-8) -> np.ndarray:
    """Stabilising solution of the discrete algebraic Riccati equation.

    Plain value iteration from P = Q. Convergence is declared when the
    sup-norm of the update falls below ``tol`` relative to max(1, |P|).
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.reshape(A.shape[0], -1)
    P = Q.copy()
    for _ in range(max_iter):
        P_next = riccati_map(P, A, B, Q, R)
        P_next = 0.5 * (P_next + P_next.T)
        step = np.max(np.abs(P_next - P))
        P = P_next
        if not np.all(np.isfinite(P)):
            break
        if step <= tol * max(1.0, np.max(np.abs(P))):
            res = np.max(np.abs(riccati_map(P, A, B, Q, R) - P))
            if res > residual_tol * max(1.0, np.max(np.abs(P))):
                raise NumericalFailure(f"dare converged but residual is {res:.3e}")
            return P
    raise NumericalFailure(
        f"dare did not converge in {max_iter} iterations; (A, B) may not be stabilisable"
    )


def riccati_map(P, A, B, Q, R) -> np.ndarray:
    AtPB = A.T @ P @ B
    return A.T @ P @ A - AtPB @ np.linalg.solve(B.T @ P @ B + R, AtPB.T) + Q


# ---------------------------------------------------------------------------
# Semidefinite programs
# ---------------------------------------------------------------------------

@dataclass
class _PSD:
    expr: cp.Expression
    strict: bool
    name: str


class LMIProblem:
    """Declarative container for an LMI feasibility / optimisation problem.

    Variables are declared by name; constraints are affine cvxpy expressions
    built from them. Strict inequalities are enforced with a margin.

    Example:
        >>> prob = LMIProblem()
        >>> P = prob.symmetric("P", 2)
        >>> prob.psd(P, strict=True)
        >>> prob.psd(np.eye(2) - P)
        >>> sol = solve_lmi(prob)
    """

    def __init__(self):
        self.variables: dict[str, cp.Variable] = {}
        self.psd_constraints: list[_PSD] = []
        self.equalities: list[tuple[cp.Expression, str]] = []
        self.bounds: list[cp.Constraint] = []
        self.objective: tuple[str, cp.Expression] | None = None

    def _add(self, name, var):
        if name in self.variables:
            raise ValueError(f"variable {name!r} declared twice")
        self.variables[name] = var
        return var

    def symmetric(self, name: str, n: int) -> cp.Variable:
        return self._add(name, cp.Variable((n, n), symmetric=True, name=name))

    def matrix(self, name: str, shape: tuple[int, int]) -> cp.Variable:
        return self._add(name, cp.Variable(shape, name=name))

    def scalar(self, name: str) -> cp.Variable:
        return self._add(name, cp.Variable(name=name))

    def psd(self, expr, strict: bool = False, name: str | None = None):
        expr = cp.Expression.cast_to_const(expr) if not isinstance(expr, cp.Expression) else expr
        if expr.ndim == 0:
            expr = cp.reshape(expr, (1, 1))
        if expr.shape[0] != expr.shape[1]:
            raise ValueError(f"PSD constraint needs a square expression, got {expr.shape}")
        self.psd_constraints.append(_PSD(expr, strict, name or f"psd{len(self.psd_constraints)}"))

    def equal(self, lhs, rhs=0.0, name: str | None = None):
        self.equalities.append((lhs - rhs, name or f"eq{len(self.equalities)}"))

    def bound(self, constraint: cp.Constraint):
        """Plain scalar/elementwise inequality (e.g. a cap on a decay rate)."""
        self.bounds.append(constraint)

    def maximize(self, expr):
        self.objective = ("max", expr)

    def minimize(self, expr):
        self.objective = ("min", expr)

    def to_cvxpy(self, margin: float = STRICT_MARGIN) -> cp.Problem:
        cons = []
        for c in self.psd_constraints:
            S = 0.5 * (c.expr + c.expr.T)
            shift = margin if c.strict else 0.0
            cons.append(S >> shift * np.eye(S.shape[0]))
        cons += [e == 0 for e, _ in self.equalities]
        cons += self.bounds
        if self.objective is None:
            obj = cp.Minimize(0)
        elif self.objective[0] == "max":
            obj = cp.Maximize(self.objective[1])
        else:
            obj = cp.Minimize(self.objective[1])
        return cp.Problem(obj, cons)

    def dump(self, path, margin: float = STRICT_MARGIN) -> None:
        """Write the conic data (c, A, b, cone sizes) in matrix-market style."""
        data, _, _ = self.to_cvxpy(margin).get_problem_data(cp.CLARABEL)
        A = sparse.coo_matrix(data["A"])
        with open(path, "w") as f:
            f.write("%%MatrixMarket matrix coordinate real general\n")
            f.write(f"% cones: {data['dims']}\n")
            f.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
            for i, j, v in zip(A.row, A.col, A.data):
                f.write(f"{i + 1} {j + 1} {v:.17g}\n")
            f.write("% b\n")
            f.write("\n".join(f"{v:.17g}" for v in data["b"]) + "\n")
            f.write("% c\n")
            f.write("\n".join(f"{v:.17g}" for v in data["c"]) + "\n")


@dataclass
class LMISolution:
    values: dict[str, np.ndarray]
    status: str
    objective: float | None
    solve_time: float
    min_eigs: dict[str, float] = field(default_factory=dict)
    eq_residuals: dict[str, float] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]


def solve_lmi(problem: LMIProblem, tol: float | None = None, margin: float = STRICT_MARGIN,
              solver: str = "CLARABEL") -> LMISolution:
    """Solve an :class:`LMIProblem` and check the answer against ``tol``.

    Raises:
        Infeasible: the solver certified (or strongly suspects) infeasibility.
        NumericalFailure: the solver stopped without an acceptable point, or
            the returned point violates a constraint by more than ``tol``.
    """
    tol = default_tol(1e-7) if tol is None else tol
    prob = problem.to_cvxpy(margin)
    t0 = time.perf_counter()
    try:
        prob.solve(solver=solver)
    except cp.error.SolverError as exc:
        raise NumericalFailure(f"SDP solver error: {exc}") from exc
    elapsed = time.perf_counter() - t0
    status = prob.status
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise Infeasible(f"SDP infeasible ({status})", {"status": status, "time": elapsed})
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        raise NumericalFailure(f"SDP unbounded ({status})")
    if status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise NumericalFailure(f"SDP solver returned status {status}")
    values = {k: np.array(v.value, dtype=float) for k, v in problem.variables.items()}
    min_eigs = {}
    for c in problem.psd_constraints:
        S = np.asarray(c.expr.value, dtype=float)
        min_eigs[c.name] = float(np.linalg.eigvalsh(0.5 * (S + S.T))[0])
    eq_res = {name: float(np.max(np.abs(np.asarray(e.value)))) for e, name in problem.equalities}
    worst = min(min_eigs.values(), default=0.0)
    if worst < -tol or any(r > tol for r in eq_res.values()):
        raise NumericalFailure(
            f"SDP answer violates constraints (min eig {worst:.3e}, eq residuals {eq_res})"
        )
    return LMISolution(values, status, prob.value, elapsed, min_eigs, eq_res)


# ---------------------------------------------------------------------------
# Quadratic programs
# ---------------------------------------------------------------------------

@dataclass
class QPProblem:
    """min 0.5 x'Hx + f'x  s.t.  A_eq x = b_eq,  lb <= A_in x <= ub."""

    H: np.ndarray
    f: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_in: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.f = np.asarray(self.f, dtype=float).ravel()
        n = self.f.size
        if self.H.shape != (n, n):
            raise ValueError(f"Hessian shape {self.H.shape} does not match {n} variables")
        if not np.allclose(self.H, self.H.T, atol=1e-10 * max(1.0, np.abs(self.H).max())):
            raise ValueError("Hessian must be symmetric")
        for a, b in (("A_eq", "b_eq"), ("A_in", "lb")):
            M = getattr(self, a)
            if M is not None:
                setattr(self, a, np.atleast_2d(np.asarray(M, dtype=float)).reshape(-1, n))
        if self.A_eq is not None:
            self.b_eq = np.asarray(self.b_eq, dtype=float).ravel()
        if self.A_in is not None:
            m = self.A_in.shape[0]
            self.lb = np.full(m, -np.inf) if self.lb is None else np.asarray(self.lb, float).ravel()
            self.ub = np.full(m, np.inf) if self.ub is None else np.asarray(self.ub, float).ravel()

    @property
    def n(self) -> int:
        return self.f.size

    def stacked(self):
        rows, lo, hi = [], [], []
        if self.A_eq is not None:
            rows.append(self.A_eq)
            lo.append(self.b_eq)
            hi.append(self.b_eq)
        if self.A_in is not None:
            rows.append(self.A_in)
            lo.append(self.lb)
            hi.append(self.ub)
        if not rows:
            return np.zeros((0, self.n)), np.zeros(0), np.zeros(0)
        return np.vstack(rows), np.concatenate(lo), np.concatenate(hi)


@dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    solve_time: float
    kkt: dict


def kkt_residuals(p: QPProblem, x, y) -> dict:
    A, lo, hi = p.stacked()
    stat = p.H @ x + p.f + (A.T @ y if A.size else 0.0)
    Ax = A @ x if A.size else np.zeros(0)
    prim = np.maximum(np.maximum(lo - Ax, Ax - hi), 0.0) if A.size else np.zeros(0)
    return {
        "stationarity": float(np.max(np.abs(stat))) if np.size(stat) else 0.0,
        "primal": float(np.max(prim)) if prim.size else 0.0,
    }


def solve_qp(p: QPProblem, tol: float | None = None, max_iter: int = 20_000) -> QPResult:
    """Solve a convex QP with OSQP (polished) and check KKT residuals."""
    tol = default_tol(1e-7) if tol is None else tol
    A, lo, hi = p.stacked()
    if A.shape[0] == 0:
        # Unconstrained: closed form (Hessian must be nonsingular).
        t0 = time.perf_counter()
        try:
            x = np.linalg.solve(p.H, -p.f)
        except np.linalg.LinAlgError as exc:
            raise NumericalFailure("unconstrained QP with singular Hessian") from exc
        return QPResult(x, np.zeros(0), "solved", 0, time.perf_counter() - t0, kkt_residuals(p, x, np.zeros(0)))
    lo = np.where(np.isinf(lo), -1e30, lo)
    hi = np.where(np.isinf(hi), 1e30, hi)
    solver = osqp.OSQP()
    solver.setup(
        sparse.csc_matrix(np.triu(p.H)), p.f, sparse.csc_matrix(A), lo, hi,
        verbose=False, eps_abs=1e-10, eps_rel=1e-10, eps_prim_inf=1e-9, eps_dual_inf=1e-9,
        max_iter=max_iter, polishing=True, polish_refine_iter=10, adaptive_rho=True,
    )
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(io.StringIO()):  # OSQP's polish notice ignores verbose
        res = solver.solve(raise_error=False)
    elapsed = time.perf_counter() - t0
    status = str(res.info.status).lower()
    if "infeasible" in status and "dual" not in status:
        raise Infeasible(f"QP {status}", {"status": status})
    if res.x is None or not np.all(np.isfinite(res.x)):
        raise NumericalFailure(f"QP solver failed ({status})")
    x = np.asarray(res.x, dtype=float)
    y = np.asarray(res.y, dtype=float)
    kkt = kkt_residuals(p, x, y)
    scale = max(1.0, float(np.max(np.abs(p.f))) if p.f.size else 1.0, float(np.max(np.abs(p.H))))
    if kkt["primal"] > tol * max(1.0, np.max(np.abs(hi[np.abs(hi) < 1e29]), initial=1.0)):
        if "solved" not in status:
            raise Infeasible(f"QP {status}; primal residual {kkt['primal']:.3e}", {"status": status})
        raise NumericalFailure(f"QP primal residual {kkt['primal']:.3e} ({status})")
    if kkt["stationarity"] > 1e3 * tol * scale:
        raise NumericalFailure(f"QP stationarity residual {kkt['stationarity']:.3e} ({status})")
    return QPResult(x, y, status, int(res.info.iter), elapsed, kkt)


def solve_qp_or(p: QPProblem, fallback: Callable[[Exception], np.ndarray], tol: float | None = None):
    """Helper for callers that degrade gracefully on solver trouble."""
    try:
        return solve_qp(p, tol).x, None
    except (Infeasible, NumericalFailure) as exc:
        return fallback(exc), exc
