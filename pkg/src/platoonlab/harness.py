"""End-to-end experiment: ACC data collection, synthesis, dual-loop control.

A run has three phases:

1. ``T`` steps of the baseline ACC law on the rear AV (plus a small seeded
   dither) while the data matrices are recorded;
2. synthesis of the inner gain, the observer and the MPC terminal weight;
3. dual-loop control u = K x + u_hat until the end of the drive cycle.

The ACC baseline keeps running phase-1 behaviour for the whole cycle.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data_engine import ACCGains, DataLog, acc_control, add_excitation, record_sample
from .dynamics import (
    PlatoonScenario,
    disturbance_matrix,
    input_matrix,
    leader_control,
    platoon_errors,
    step_platoon,
)
from .exceptions import CollisionError, Infeasible
from .inner_loop import compute_delta, feasibility_boundary, synthesize_inner
from .mpc import OffsetFreeMPC, dual_loop_control
from .observer import (
    build_internal_model,
    default_disturbance_maps,
    observer_init,
    observer_measure,
    observer_step,
    structured_disturbance_maps,
    synthesize_observer,
)

log = logging.getLogger(__name__)

ACC = "acc"
DUAL = "dual"


# ---------------------------------------------------------------------------
# Drive cycles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DriveCycle:
    """Reference velocity samples with linear interpolation in between."""

    t: np.ndarray
    v: np.ndarray
    name: str = "cycle"

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size < 2:
            raise ValueError("drive cycle needs at least two (t, v) samples")
        if np.any(np.diff(t) <= 0):
            raise ValueError("drive cycle time must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "v", v)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def v_ref(self, t: float) -> float:
        return float(np.interp(t, self.t, self.v))


def load_drive_cycle(path, v_max: float = 40.0) -> DriveCycle:
    """Read a two-column ``t,v`` CSV (SI units)."""
    path = Path(path)
    ts, vs = [], []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header[:2]] != ["t", "v"]:
            raise ValueError(f"{path}:1: expected header 't,v', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            try:
                t, v = float(row[0]), float(row[1])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {row}") from None
            if not (math.isfinite(t) and math.isfinite(v)):
                raise ValueError(f"{path}:{lineno}: non-finite value")
            if ts and t <= ts[-1]:
                raise ValueError(f"{path}:{lineno}: time {t} is not after {ts[-1]}")
            if not 0.0 <= v <= v_max:
                raise ValueError(f"{path}:{lineno}: velocity {v} outside [0, {v_max}]")
            ts.append(t)
            vs.append(v)
    if len(ts) < 2:
        raise ValueError(f"{path}: need at least two samples")
    return DriveCycle(np.array(ts), np.array(vs), name=path.stem)


def synthetic_aggressive_cycle(duration: float = 300.0, seed: int = 0, hold: float = 75.0,
                               v_hold: float = 20.0, a_max: float = 3.0,
                               v_range=(5.0, 35.0)) -> DriveCycle:
    """Constant-speed hold followed by random piecewise-constant-acceleration ramps.

    Segment lengths are 2-8 s; accelerations are drawn in [-a_max, a_max] and
    cut short whenever the speed would leave ``v_range``.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    dt = 0.1
    ts = [0.0, min(hold, duration)]
    vs = [v_hold, v_hold]
    t, v = ts[-1], v_hold
    lo, hi = v_range
    while t < duration - 1e-9:
        seg = min(float(rng.uniform(2.0, 8.0)), duration - t)
        a = float(rng.uniform(-a_max, a_max))
        if rng.random() < 0.2:
            a = 0.0
        for _ in range(max(1, int(round(seg / dt)))):
            v_next = v + a * dt
            if not lo <= v_next <= hi:
                a = 0.0
                v_next = v
            t = round(t + dt, 10)
            v = v_next
            ts.append(t)
            vs.append(v)
            if t >= duration - 1e-9:
                break
    return DriveCycle(np.array(ts), np.array(vs), name=f"synthetic-{seed}")


# ---------------------------------------------------------------------------
# Configuration and logs
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Run settings; defaults reproduce the reference experiment.

    ``delta=None`` uses the actuator/parameter bound of the disturbance; a
    number is taken as the collection-phase bound on the leader's deviation.
    """

    T: int = 500
    excitation: float = 0.1
    seed: int = 42
    delta: float | None = 1e-3
    epsilon: float | None = 10.0
    gamma_cap: float = 1.0
    beta1_upper: float = 0.5
    tau1_lower: float = 0.1
    N: int = 2
    Q: float = 10.0
    R: float = 1.0
    Q_bar: float = 1e3
    R_bar: float = 0.0
    h_tilde_max: float = 20.0
    v_tilde_max: float = 10.0
    disturbance_maps: str = "default"
    pole_radius: float | None = None
    bisect_on_infeasible: bool = True

    def __post_init__(self):
        if self.T < 1 or self.N < 1:
            raise ValueError(f"T and N must be >= 1, got T={self.T}, N={self.N}")
        if self.delta is not None and self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.excitation < 0 or self.h_tilde_max <= 0 or self.v_tilde_max <= 0:
            raise ValueError("excitation must be >= 0 and constraint bounds positive")
        if self.disturbance_maps not in ("default", "structured"):
            raise ValueError(f"unknown disturbance_maps {self.disturbance_maps!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class SimulationLog:
    """Per-step record of a run plus per-run metadata."""

    n: int
    controller: str
    t_s: float
    meta: dict = field(default_factory=dict)
    rows: list = field(default_factory=list, repr=False)
    synthesis: dict = field(default_factory=dict)
    collision: dict | None = None
    data: DataLog | None = field(default=None, repr=False)

    @property
    def steps(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def columns(self) -> list[str]:
        return list(self.rows[0]) if self.rows else []


def _row(k, t, phase, states, x, u0, un, v_ref, u_hat=0.0, xi_hat=None, x_bar=None, u_bar=0.0,
         status="", solve_time=0.0, iterations=0, clamped=False) -> dict:
    r = {"k": k, "t": t, "phase": phase, "v_ref": v_ref}
    for i, s in enumerate(states):
        r[f"p{i}"], r[f"v{i}"], r[f"a{i}"] = s.p, s.v, s.a
    for j, xj in enumerate(x):
        r[f"x{j}"] = float(xj)
    r.update(u0=u0, un=un, u_hat=u_hat, u_bar=u_bar, status=status, solve_time=solve_time,
             iterations=iterations, clamped=int(clamped))
    n_xi = len(x) + 4
    xi = np.zeros(n_xi) if xi_hat is None else xi_hat
    for j in range(n_xi):
        r[f"xi{j}"] = float(xi[j])
    xb = np.zeros(len(x)) if x_bar is None else x_bar
    for j in range(len(x)):
        r[f"xbar{j}"] = float(xb[j])
    return r


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def synthesize_all(data: DataLog, scenario: PlatoonScenario, config: ExperimentConfig) -> dict:
    """Inner gain, internal model, observer and MPC controller from a data log.

    Raises:
        Infeasible: inner-loop or observer SDP has no solution. When the
            bound-derived delta is infeasible, ``diagnostics['delta_boundary']``
            holds the bisection estimate of the largest feasible delta.
    """
    n, t_s = scenario.n, scenario.t_s
    D = disturbance_matrix(n, t_s)
    B = input_matrix(n, scenario.vehicles[-1].tau, t_s)
    bound = compute_delta(scenario.u_max, t_s, config.beta1_upper, config.tau1_lower)
    delta = bound.delta if config.delta is None else float(config.delta)
    t0 = time.perf_counter()
    try:
        gain = synthesize_inner(data, D, delta, epsilon=config.epsilon, gamma_cap=config.gamma_cap)
    except Infeasible as exc:
        if config.bisect_on_infeasible:
            exc.diagnostics["delta_boundary"] = feasibility_boundary(data, D, delta, epsilon=config.epsilon)
            log.error("inner-loop SDP infeasible at delta=%g; feasibility boundary ~ %g",
                      delta, exc.diagnostics["delta_boundary"])
        exc.diagnostics["delta"] = delta
        raise
    if config.disturbance_maps == "structured":
        B_d, C_d = structured_disturbance_maps(3 * n, t_s)
    else:
        B_d, C_d = default_disturbance_maps(3 * n)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = build_internal_model(data, gain, B, B_d, C_d, t_s)
    obs = synthesize_observer(model, config.pole_radius)
    mpc = OffsetFreeMPC(config.N, config.Q, config.R, config.Q_bar, config.R_bar, scenario.u_max,
                        config.h_tilde_max, config.v_tilde_max).fit(model)
    return {
        "gain": gain, "model": model, "observer": obs, "mpc": mpc,
        "bound": bound, "delta": delta,
        "time": time.perf_counter() - t0,
        "warnings": [str(w.message) for w in caught],
    }


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------

def run_experiment(scenario: PlatoonScenario, controller: str, cycle: DriveCycle,
                   config: ExperimentConfig | None = None) -> SimulationLog:
    """Simulate one closed-loop run over ``cycle``.

    A collision ends the run early; the partial log is returned with
    ``log.collision`` set. Synthesis infeasibility propagates as
    :class:`Infeasible`.
    """
    controller = controller.lower()
    if controller not in (ACC, DUAL):
        raise ValueError(f"controller must be 'acc' or 'dual', got {controller!r}")
    config = config or ExperimentConfig()
    n, t_s = scenario.n, scenario.t_s
    steps = int(round(cycle.duration / t_s))
    if steps <= config.T:
        raise ValueError(f"cycle of {cycle.duration} s is too short for {config.T} collection steps")
    sim = SimulationLog(n=n, controller=controller, t_s=t_s, meta={
        "scenario_digest": scenario.digest(), "cycle": cycle.name, "T": config.T,
        "steps": steps, "config": config.to_dict(), "d_safe": scenario.d_safe,
        "u_max": scenario.u_max, "h_tilde_max": config.h_tilde_max,
    })
    data = DataLog(n_x=3 * n, t_s=t_s, meta={"scenario_digest": scenario.digest()})
    pol, d_safe, u_max = scenario.policy, scenario.d_safe, scenario.u_max
    gains = ACCGains()
    t_start = float(cycle.t[0])
    st = list(scenario.initial_states)
    syn = obs_state = None
    tripwire: list = []
    k = 0
    try:
        for k in range(steps):
            t = t_start + k * t_s
            v_ref = cycle.v_ref(t)
            x = platoon_errors(st, v_ref, pol, d_safe)
            u0 = leader_control(st[0], v_ref, u_max=u_max)
            h_n = st[-2].p - st[-1].p
            extra = {}
            if controller == ACC or k < config.T:
                un = add_excitation(acc_control(h_n, st[-1].v, st[-2].v, gains, u_max),
                                    k, config.excitation, u_max, config.seed)
                phase = "collect" if k < config.T else "acc"
            else:
                if syn is None:
                    syn = synthesize_all(data, scenario, config)
                    sim.synthesis = _synthesis_summary(syn)
                    obs_state = observer_init(syn["observer"], x, syn["model"].n_w)
                obs_state = observer_measure(obs_state, syn["observer"], x)
                K = syn["gain"].K
                mpc = syn["mpc"]
                u_hat = mpc.predict(obs_state.xi_hat, K, x_meas=x)
                info = mpc.last_info_
                un = dual_loop_control(x, u_hat, K, mpc.config_.sets, tripwire)
                applied_hat = un - float(K.ravel() @ x)
                obs_state = observer_step(obs_state, syn["observer"], applied_hat, x)
                phase = "dual"
                extra = dict(u_hat=u_hat, xi_hat=obs_state.xi_hat, x_bar=info["x_bar"],
                             u_bar=info["u_bar"], status=info["status"],
                             solve_time=info["solve_time"], iterations=info["iterations"],
                             clamped=abs(float(K.ravel() @ x) + u_hat) > u_max + 1e-6)
            sim.rows.append(_row(k, t, phase, st, x, u0, un, v_ref, **extra))
            st_next = step_platoon(st, u0, un, scenario, step=k)
            if k < config.T:
                v_next = v_ref
                record_sample(data, x, un, platoon_errors(st_next, v_next, pol, d_safe))
            st = st_next
    except CollisionError as exc:
        sim.collision = {"step": exc.step, "vehicle": exc.vehicle, "gap": exc.gap, "message": str(exc)}
        log.error("%s (step %s)", exc, exc.step)
    sim.meta["phase_boundary"] = config.T
    sim.meta["tripwire_count"] = len(tripwire)
    if syn is not None:
        sim.meta["target_fallbacks"] = syn["mpc"].target_fallbacks_
        if tripwire:
            log.warning("dual-loop command clamped on %d steps", len(tripwire))
    sim.meta["data_digest"] = data.digest()
    sim.data = data
    return sim


def _synthesis_summary(syn: dict) -> dict:
    g, o = syn["gain"], syn["observer"]
    return {
        "K": g.K.ravel().tolist(), "gamma": g.gamma, "epsilon": g.epsilon, "delta": syn["delta"],
        "delta_bound": syn["bound"].delta, "data_digest": g.data_digest,
        "inner_solve_time": g.solve_time, "observer_epsilon": o.epsilon_o,
        "observer_rho": o.diagnostics.get("rho"), "phi_cond": o.diagnostics.get("phi_cond"),
        "detectable": syn["model"].detectable, "synthesis_time": syn["time"],
        "warnings": syn["warnings"],
    }


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    window: tuple
    peak_v_err: list
    rms_spacing_error: float
    peak_spacing_error: float
    input_violations: int
    spacing_violations: int
    head_to_tail: float
    hv_chain: float
    ratio_defined: bool
    mpc_solve_mean: float
    mpc_solve_max: float
    mpc_fallbacks: int
    collision: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, float) and not math.isfinite(v):
                d[k] = None
        return d


def _ratio(a: float, b: float) -> tuple[float, bool]:
    if b == 0.0:
        return float("nan"), False
    return a / b, True


def compute_metrics(sim: SimulationLog, start: int | None = None, tol: float = 1e-6) -> Metrics:
    """Metrics over rows ``k >= start`` (default: the post-synthesis window)."""
    if not sim.rows:
        raise ValueError("empty simulation log")
    n = sim.n
    start = sim.meta.get("phase_boundary", 0) if start is None else start
    rows = [r for r in sim.rows if r["k"] >= start] or sim.rows
    d_safe = sim.meta.get("d_safe", 20.0)
    u_max = sim.meta.get("u_max", 4.0)
    h_max = sim.meta.get("h_tilde_max", math.inf)
    verr = np.array([[r[f"x{3 * (i - 1) + 1}"] for i in range(1, n + 1)] for r in rows])
    peaks = np.max(np.abs(verr), axis=0)
    h_err = np.array([r[f"p{n - 1}"] - r[f"p{n}"] - d_safe for r in rows])
    un = np.array([r["un"] for r in rows])
    h2t, ok1 = _ratio(float(peaks[-1]), float(peaks[0]))
    chain, ok2 = _ratio(float(peaks[-2]), float(peaks[0])) if n >= 2 else (float("nan"), False)
    dual = [r for r in rows if r["phase"] == "dual"]
    solve = np.array([r["solve_time"] for r in dual]) if dual else np.zeros(0)
    fallbacks = sum(1 for r in dual if str(r["status"]).startswith("fallback"))
    return Metrics(
        window=(int(rows[0]["k"]), int(rows[-1]["k"])),
        peak_v_err=peaks.tolist(),
        rms_spacing_error=float(np.sqrt(np.mean(h_err ** 2))),
        peak_spacing_error=float(np.max(np.abs(h_err))),
        input_violations=int(np.sum(np.abs(un) > u_max + tol)),
        spacing_violations=int(np.sum(np.abs(h_err) > h_max + tol)),
        head_to_tail=h2t,
        hv_chain=chain,
        ratio_defined=ok1 and ok2,
        mpc_solve_mean=float(solve.mean()) if solve.size else 0.0,
        mpc_solve_max=float(solve.max()) if solve.size else 0.0,
        mpc_fallbacks=int(fallbacks),
        collision=sim.collision is not None,
    )


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

WALL_CLOCK_COLUMNS = ("solve_time",)


def write_trajectory(sim: SimulationLog, path) -> Path:
    """Full per-step log as CSV, minus wall-clock columns (kept reproducible)."""
    path = Path(path)
    cols = [c for c in sim.columns() if c not in WALL_CLOCK_COLUMNS]
    _write_rows(sim.rows, cols, path)
    return path


def write_telemetry(sim: SimulationLog, path) -> Path:
    """Per-step solver telemetry (status, iterations, wall time)."""
    path = Path(path)
    _write_rows(sim.rows, ["k", "status", "iterations", "solve_time"], path)
    return path


def _write_rows(rows, cols, path: Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def _parse(key, val, path, lineno):
    if key in ("phase", "status"):
        return val
    try:
        return int(val) if key in ("k", "iterations", "clamped") else float(val)
    except (TypeError, ValueError):
        raise ValueError(f"{path}:{lineno}: bad value {val!r} in column {key}") from None


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return [{key: _parse(key, val, path, lineno) for key, val in raw.items()}
                for lineno, raw in enumerate(csv.DictReader(f), start=2)]


def read_trajectory(path) -> SimulationLog:
    """Rebuild a log from ``trajectory.csv`` (plus ``telemetry.csv`` and ``run.json`` if present)."""
    path = Path(path)
    rows = _read_rows(path)
    if not rows:
        raise ValueError(f"{path}: no rows")
    tele_path = path.with_name("telemetry.csv")
    tele = {r["k"]: r["solve_time"] for r in _read_rows(tele_path)} if tele_path.exists() else {}
    for r in rows:
        r["solve_time"] = tele.get(r["k"], 0.0)
    n = sum(1 for c in rows[0] if c[0] == "p" and c[1:].isdigit()) - 1
    meta_path = path.with_name("run.json")
    meta = json.loads(meta_path.read_text())["meta"] if meta_path.exists() else {}
    t_s = rows[1]["t"] - rows[0]["t"] if len(rows) > 1 else 0.05
    sim = SimulationLog(n=n, controller=meta.get("controller", ""), t_s=t_s, meta=meta, rows=rows)
    if "phase_boundary" not in sim.meta:
        sim.meta["phase_boundary"] = next((r["k"] for r in rows if r["phase"] != "collect"), 0)
    return sim


def export(sim: SimulationLog, metrics: Metrics, out_dir, formats=("csv", "svg")) -> dict:
    """Write trajectory.csv, telemetry.csv, metrics.json, run.json and SVG plots."""
    from .plots import line_plot

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    if "csv" in formats:
        files["trajectory"] = str(write_trajectory(sim, out / "trajectory.csv"))
        files["telemetry"] = str(write_telemetry(sim, out / "telemetry.csv"))
    full = compute_metrics(sim, start=0)
    summary = {"post_synthesis": metrics.to_dict(), "full_run": full.to_dict()}
    (out / "metrics.json").write_text(json.dumps(summary, indent=2))
    files["metrics"] = str(out / "metrics.json")
    run = {"meta": dict(sim.meta, controller=sim.controller), "synthesis": sim.synthesis,
           "collision": sim.collision}
    (out / "run.json").write_text(json.dumps(run, indent=2, default=float))
    files["run"] = str(out / "run.json")
    if "svg" in formats:
        n = sim.n
        t = sim.column("t")
        u_max = sim.meta.get("u_max", 4.0)
        d_safe = sim.meta.get("d_safe", 20.0)
        gap = sim.column(f"p{n - 1}") - sim.column(f"p{n}")
        plots = {
            "v_ref.svg": ("reference velocity", "v [m/s]", {"v_ref": sim.column("v_ref")}, {}),
            "u_rear.svg": (f"input of vehicle {n}", "u [m/s^2]", {f"u{n}": sim.column("un")},
                           {"+u_max": u_max, "-u_max": -u_max}),
            "v_err_rear.svg": (f"velocity error of vehicle {n}", "v err [m/s]",
                               {f"v{n}": sim.column(f"x{3 * n - 2}")}, {}),
            "gap_rear.svg": (f"gap between vehicles {n - 1} and {n}", "gap [m]", {"gap": gap},
                             {"d_safe": d_safe}),
            "v_err_all.svg": ("velocity errors", "v err [m/s]",
                              {f"v{i}": sim.column(f"x{3 * (i - 1) + 1}") for i in range(1, n + 1)}, {}),
        }
        for name, (title, ylabel, series, hlines) in plots.items():
            (out / name).write_text(line_plot(t, series, title=title, ylabel=ylabel, hlines=hlines))
            files[name] = str(out / name)
    return files
