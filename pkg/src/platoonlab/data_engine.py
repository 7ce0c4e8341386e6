"""Pre-synthesis data collection: baseline ACC law, excitation and data logs."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import numerical_rank


@dataclass(frozen=True)
class ACCGains:
    """Constant time-gap ACC law gains."""

    k_gap: float = 0.23
    k_vel: float = 0.07
    t_gap: float = 1.4
    d_0: float = 10.0

    def __post_init__(self):
        if min(self.k_gap, self.k_vel, self.t_gap, self.d_0) <= 0:
            raise ValueError("ACC gains must all be positive")


def acc_control(h: float, v: float, v_prev: float, gains: ACCGains = ACCGains(), u_max: float = 4.0) -> float:
    u = gains.k_gap * (h - (gains.d_0 + gains.t_gap * v)) + gains.k_vel * (v_prev - v)
    return float(np.clip(u, -u_max, u_max))


def add_excitation(u_acc: float, k: int, amplitude: float, u_max: float, seed: int = 42) -> float:
    """``u_acc`` plus the k-th sample of a seeded dither, re-saturated.

    Stateless: the k-th value depends only on (k, seed), so replaying a step
    index always reproduces the same excitation.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    rng = np.random.default_rng([seed, k])
    u = u_acc + amplitude * rng.uniform(-1.0, 1.0)
    return float(np.clip(u, -u_max, u_max))


@dataclass
class DataLog:
    """Column-wise data matrices U0 (n_u x T), X0 and X1 (n_x x T)."""

    n_x: int
    n_u: int = 1
    t_s: float = 0.05
    meta: dict = field(default_factory=dict)
    _u: list = field(default_factory=list, repr=False)
    _x0: list = field(default_factory=list, repr=False)
    _x1: list = field(default_factory=list, repr=False)

    @classmethod
    def from_matrices(cls, U0, X0, X1, t_s: float = 0.05, meta: dict | None = None) -> "DataLog":
        U0 = np.atleast_2d(np.asarray(U0, dtype=float))
        X0 = np.asarray(X0, dtype=float)
        X1 = np.asarray(X1, dtype=float)
        if X0.shape != X1.shape or U0.shape[1] != X0.shape[1]:
            raise ValueError(f"inconsistent shapes U0 {U0.shape}, X0 {X0.shape}, X1 {X1.shape}")
        log = cls(n_x=X0.shape[0], n_u=U0.shape[0], t_s=t_s, meta=dict(meta or {}))
        log._u = list(U0.T.copy())
        log._x0 = list(X0.T.copy())
        log._x1 = list(X1.T.copy())
        return log

    @property
    def T(self) -> int:
        return len(self._x0)

    @property
    def U0(self) -> np.ndarray:
        return np.array(self._u, dtype=float).reshape(self.T, self.n_u).T

    @property
    def X0(self) -> np.ndarray:
        return np.array(self._x0, dtype=float).reshape(self.T, self.n_x).T

    @property
    def X1(self) -> np.ndarray:
        return np.array(self._x1, dtype=float).reshape(self.T, self.n_x).T

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for m in (self.U0, self.X0, self.X1):
            h.update(np.ascontiguousarray(m).tobytes())
        return h.hexdigest()[:16]


def record_sample(log: DataLog, x_k, u_k, x_k1) -> DataLog:
    x_k = np.asarray(x_k, dtype=float).ravel()
    x_k1 = np.asarray(x_k1, dtype=float).ravel()
    u_k = np.atleast_1d(np.asarray(u_k, dtype=float)).ravel()
    if x_k.size != log.n_x or x_k1.size != log.n_x or u_k.size != log.n_u:
        raise ValueError(
            f"sample dimensions ({x_k.size}, {u_k.size}, {x_k1.size}) "
            f"do not match log (n_x={log.n_x}, n_u={log.n_u})"
        )
    log._x0.append(x_k)
    log._u.append(u_k)
    log._x1.append(x_k1)
    return log


def validate_log(log: DataLog) -> tuple[int, bool]:
    """Numerical row rank of X0 and whether it equals n_x."""
    if log.T < log.n_x:
        rank = numerical_rank(log.X0) if log.T else 0
        return rank, False
    rank = numerical_rank(log.X0)
    return rank, rank == log.n_x


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------

def _write_matrix(path: Path, M: np.ndarray, prefix: str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"{prefix}{j}" for j in range(M.shape[0])])
        for col in M.T:
            w.writerow([f"{v:.17g}" for v in col])


def _read_matrix(path: Path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise ValueError(f"{path}: empty file")
    body = []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            body.append([float(v) for v in row])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return np.array(body, dtype=float).reshape(len(body), len(rows[0])).T


def save_log(log: DataLog, out_dir) -> dict:
    """Write U0.csv, X0.csv, X1.csv (one row per sample) and meta.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix(out / "U0.csv", log.U0, "u")
    _write_matrix(out / "X0.csv", log.X0, "x")
    _write_matrix(out / "X1.csv", log.X1, "x")
    meta = {"t_s": log.t_s, "T": log.T, "n_x": log.n_x, "n_u": log.n_u, "digest": log.digest()}
    meta.update(log.meta)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return {name: str(out / name) for name in ("U0.csv", "X0.csv", "X1.csv", "meta.json")}


def load_log(in_dir) -> DataLog:
    d = Path(in_dir)
    meta = json.loads((d / "meta.json").read_text())
    U0 = _read_matrix(d / "U0.csv")
    X0 = _read_matrix(d / "X0.csv")
    X1 = _read_matrix(d / "X1.csv")
    if U0.shape[1] != meta["T"]:
        raise ValueError(f"{d}: meta says T={meta['T']} but U0.csv has {U0.shape[1]} rows")
    extra = {k: v for k, v in meta.items() if k not in ("t_s", "T", "n_x", "n_u", "digest")}
    return DataLog.from_matrices(U0, X0, X1, t_s=meta["t_s"], meta=extra)
