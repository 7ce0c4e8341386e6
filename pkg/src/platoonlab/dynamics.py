"""Vehicle models for the mixed platoon.

The platoon is ordered front to back: vehicle 0 is the leading automated
vehicle (AV), vehicles 1..n-1 are human-driven (HV, optimal-velocity model
with a first-order actuator lag) and vehicle n is the ego AV at the rear.
All models are stepped with forward Euler at the sampling time ``t_s``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import CollisionError

AV = "AV"
HV = "HV"


@dataclass(frozen=True)
class VehicleParams:
    """Longitudinal parameters of one vehicle.

    Attributes:
        tau: propulsion time constant [s]
        alpha: headway gain [1/s], HV only
        beta: relative-velocity gain [1/s], HV only
        kind: ``"AV"`` or ``"HV"``
    """

    tau: float
    alpha: float = 0.0
    beta: float = 0.0
    kind: str = AV

    def __post_init__(self):
        if self.kind not in (AV, HV):
            raise ValueError(f"kind must be 'AV' or 'HV', got {self.kind!r}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.kind == HV and not (self.alpha > 0 and self.beta >= 0):
            raise ValueError("HV needs alpha > 0 and beta >= 0")


@dataclass(frozen=True)
class VehicleState:
    p: float
    v: float
    a: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.p, self.v, self.a)):
            raise ValueError(f"non-finite vehicle state {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.v, self.a])


@dataclass(frozen=True)
class RangePolicy:
    """Half-cosine range policy mapping a gap to the HV's desired speed."""

    h_s: float = 5.0
    h_g: float = 50.0
    v_max: float = 40.0

    def __post_init__(self):
        if not 0 < self.h_s < self.h_g:
            raise ValueError("need 0 < h_s < h_g")
        if not self.v_max > 0:
            raise ValueError("v_max must be positive")


@dataclass
class PlatoonScenario:
    """Everything needed to simulate one platoon run.

    ``vehicles[0]`` is the leader AV, ``vehicles[-1]`` the rear (ego) AV and
    everything in between an HV. ``v_star`` is the nominal reference speed
    used to fix the linearisation point.
    """

    vehicles: list[VehicleParams]
    initial_states: list[VehicleState]
    d_safe: float = 20.0
    u_max: float = 4.0
    t_s: float = 0.05
    policy: RangePolicy = field(default_factory=RangePolicy)
    v_star: float = 20.0
    v_ref_profile: str = "synthetic"

    def __post_init__(self):
        if len(self.vehicles) < 3:
            raise ValueError("a platoon needs at least 3 vehicles")
        if self.vehicles[0].kind != AV or self.vehicles[-1].kind != AV:
            raise ValueError("first and last vehicles must be AVs")
        if any(v.kind != HV for v in self.vehicles[1:-1]):
            raise ValueError("all intermediate vehicles must be HVs")
        if len(self.initial_states) != len(self.vehicles):
            raise ValueError("need one initial state per vehicle")
        if not self.t_s > 0:
            raise ValueError("t_s must be positive")
        gaps = np.diff([-s.p for s in self.initial_states])
        if np.any(gaps <= 0):
            raise ValueError("initial gaps must be positive")

    @property
    def n(self) -> int:
        """Index of the rear AV (number of error blocks)."""
        return len(self.vehicles) - 1

    @property
    def n_x(self) -> int:
        return 3 * self.n

    def to_dict(self) -> dict:
        return {
            "vehicles": [asdict(v) for v in self.vehicles],
            "initial_states": [[s.p, s.v, s.a] for s in self.initial_states],
            "d_safe": self.d_safe,
            "u_max": self.u_max,
            "t_s": self.t_s,
            "policy": asdict(self.policy),
            "v_star": self.v_star,
            "v_ref_profile": self.v_ref_profile,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlatoonScenario":
        return cls(
            vehicles=[VehicleParams(**v) for v in d["vehicles"]],
            initial_states=[VehicleState(*s) for s in d["initial_states"]],
            d_safe=float(d.get("d_safe", 20.0)),
            u_max=float(d.get("u_max", 4.0)),
            t_s=float(d.get("t_s", 0.05)),
            policy=RangePolicy(**d.get("policy", {})),
            v_star=float(d.get("v_star", 20.0)),
            v_ref_profile=d.get("v_ref_profile", "synthetic"),
        )

    def digest(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_scenario(path) -> PlatoonScenario:
    with open(path) as f:
        return PlatoonScenario.from_dict(json.load(f))


def default_scenario() -> PlatoonScenario:
    """The six-vehicle benchmark platoon (bundled ``default_scenario.json``)."""
    text = resources.files("platoonlab.data").joinpath("default_scenario.json").read_text()
    return PlatoonScenario.from_dict(json.loads(text))


def save_scenario(scenario: PlatoonScenario, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(scenario.to_dict(), indent=2))
    return path


# ---------------------------------------------------------------------------
# Range policy
# ---------------------------------------------------------------------------

def desired_velocity(h: float, policy: RangePolicy) -> float:
    if h <= policy.h_s:
        return 0.0
    if h >= policy.h_g:
        return policy.v_max
    frac = (h - policy.h_s) / (policy.h_g - policy.h_s)
    return 0.5 * policy.v_max * (1.0 - math.cos(math.pi * frac))


def desired_velocity_gradient(h: float, policy: RangePolicy) -> float:
    """dV/dh inside the open interval (h_s, h_g)."""
    if not policy.h_s < h < policy.h_g:
        raise ValueError(
            f"gradient only defined for {policy.h_s} < h < {policy.h_g}, got h={h}"
        )
    span = policy.h_g - policy.h_s
    return policy.v_max * math.pi / (2.0 * span) * math.sin(math.pi * (h - policy.h_s) / span)


def setpoint_gap(v_star: float, policy: RangePolicy) -> float:
    """Equilibrium HV gap h* at which the range policy returns ``v_star``."""
    if not 0.0 < v_star < policy.v_max:
        raise ValueError(f"v_star must lie in (0, {policy.v_max}), got {v_star}")
    span = policy.h_g - policy.h_s
    return span / math.pi * math.acos(1.0 - 2.0 * v_star / policy.v_max) + policy.h_s


# ---------------------------------------------------------------------------
# Vehicle steps
# ---------------------------------------------------------------------------

def step_av(s: VehicleState, u: float, tau: float, t_s: float) -> VehicleState:
    return VehicleState(
        s.p + t_s * s.v,
        s.v + t_s * s.a,
        s.a + (t_s / tau) * (u - s.a),
    )


def step_hv(
    s: VehicleState,
    h: float,
    v_prev: float,
    params: VehicleParams,
    policy: RangePolicy,
    t_s: float,
) -> VehicleState:
    if params.kind != HV:
        raise ValueError("step_hv needs HV parameters")
    drive = params.alpha * (desired_velocity(h, policy) - s.v) + params.beta * (v_prev - s.v)
    return VehicleState(
        s.p + t_s * s.v,
        s.v + t_s * s.a,
        s.a + (t_s / params.tau) * (drive - s.a),
    )


def gaps(states: Sequence[VehicleState]) -> np.ndarray:
    """Gaps h_i = p_{i-1} - p_i for i = 1..n."""
    p = np.array([s.p for s in states])
    return p[:-1] - p[1:]


def step_platoon(
    states: Sequence[VehicleState],
    u0: float,
    un: float,
    scenario: PlatoonScenario,
    step: int | None = None,
) -> list[VehicleState]:
    """Advance the whole platoon by one sample.

    All gaps and predecessor speeds are read from the pre-step states, so the
    update is simultaneous and consistent with the stacked Euler model.
    """
    if len(states) != len(scenario.vehicles):
        raise ValueError("state list does not match the scenario")
    h = gaps(states)
    bad = np.flatnonzero(h <= 0)
    if bad.size:
        i = int(bad[0]) + 1
        raise CollisionError(
            f"collision: gap between vehicle {i - 1} and {i} is {h[i - 1]:.3f} m",
            step=step, vehicle=i, gap=float(h[i - 1]),
        )
    t_s = scenario.t_s
    veh = scenario.vehicles
    out = [step_av(states[0], u0, veh[0].tau, t_s)]
    for i in range(1, len(states) - 1):
        out.append(step_hv(states[i], h[i - 1], states[i - 1].v, veh[i], scenario.policy, t_s))
    out.append(step_av(states[-1], un, veh[-1].tau, t_s))
    return out


def leader_control(
    s0: VehicleState,
    v_ref: float,
    k_p: float = 3.0,
    k_d: float = 0.5,
    u_max: float = 4.0,
) -> float:
    """Saturated PD speed tracker standing in for the leader's own controller."""
    u = k_p * (v_ref - s0.v) - k_d * s0.a
    return float(np.clip(u, -u_max, u_max))


# ---------------------------------------------------------------------------
# Error coordinates and the structurally known matrices
# ---------------------------------------------------------------------------

def platoon_errors(
    states: Sequence[VehicleState],
    v_star: float,
    policy: RangePolicy,
    d_safe: float,
) -> np.ndarray:
    """Stack (gap error, speed error, acceleration) for vehicles 1..n."""
    n = len(states) - 1
    h_star = setpoint_gap(v_star, policy)
    h = gaps(states)
    x = np.empty(3 * n)
    for i in range(1, n + 1):
        ref = d_safe if i == n else h_star
        x[3 * (i - 1)] = h[i - 1] - ref
        x[3 * (i - 1) + 1] = states[i].v - v_star
        x[3 * (i - 1) + 2] = states[i].a
    return x


def input_matrix(n: int, tau_n: float, t_s: float) -> np.ndarray:
    """Discrete input matrix B: only the rear AV's acceleration row is driven."""
    B = np.zeros((3 * n, 1))
    B[-1, 0] = t_s / tau_n
    return B


def disturbance_matrix(n: int, t_s: float) -> np.ndarray:
    """Discrete disturbance matrix D; w enters the first HV's block only."""
    D = np.zeros((3 * n, 2))
    D[0, 0] = t_s
    D[2, 1] = t_s
    return D


def rear_selector(n: int) -> np.ndarray:
    """C = [0, I_3] picking the rear AV's error block."""
    C = np.zeros((3, 3 * n))
    C[:, -3:] = np.eye(3)
    return C
