import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platoonlab.dynamics import (
    PlatoonScenario,
    RangePolicy,
    VehicleParams,
    VehicleState,
    default_scenario,
    desired_velocity,
    desired_velocity_gradient,
    disturbance_matrix,
    gaps,
    input_matrix,
    leader_control,
    load_scenario,
    platoon_errors,
    rear_selector,
    save_scenario,
    setpoint_gap,
    step_av,
    step_hv,
    step_platoon,
)
from platoonlab.exceptions import CollisionError
from platoonlab.oracle import build_true_error_model

POLICY = RangePolicy()


class TestRangePolicy:
    def test_clamped_below_and_above(self):
        assert desired_velocity(0.0, POLICY) == 0.0
        assert desired_velocity(POLICY.h_s, POLICY) == 0.0
        assert desired_velocity(POLICY.h_g, POLICY) == POLICY.v_max
        assert desired_velocity(1e3, POLICY) == POLICY.v_max

    def test_midpoint_is_half_speed(self):
        mid = 0.5 * (POLICY.h_s + POLICY.h_g)
        assert desired_velocity(mid, POLICY) == pytest.approx(0.5 * POLICY.v_max, abs=1e-12)

    @given(st.floats(min_value=5.01, max_value=49.99))
    def test_gradient_matches_central_difference(self, h):
        eps = 1e-6
        fd = (desired_velocity(h + eps, POLICY) - desired_velocity(h - eps, POLICY)) / (2 * eps)
        assert desired_velocity_gradient(h, POLICY) == pytest.approx(fd, abs=1e-6)

    @given(st.floats(min_value=0.01, max_value=39.99))
    def test_setpoint_round_trip(self, v):
        assert desired_velocity(setpoint_gap(v, POLICY), POLICY) == pytest.approx(v, abs=1e-9)

    @given(st.floats(min_value=5.0, max_value=50.0), st.floats(min_value=5.0, max_value=50.0))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert desired_velocity(lo, POLICY) <= desired_velocity(hi, POLICY)

    def test_gradient_outside_open_interval_raises(self):
        with pytest.raises(ValueError):
            desired_velocity_gradient(POLICY.h_s, POLICY)

    def test_setpoint_rejects_saturated_speed(self):
        with pytest.raises(ValueError):
            setpoint_gap(POLICY.v_max, POLICY)


class TestVehicleSteps:
    def test_av_euler_step(self):
        s = step_av(VehicleState(1.0, 2.0, 0.5), u=1.5, tau=0.1, t_s=0.05)
        assert (s.p, s.v) == (1.0 + 0.05 * 2.0, 2.0 + 0.05 * 0.5)
        assert s.a == pytest.approx(0.5 + 0.5 * (1.5 - 0.5))

    def test_hv_at_equilibrium_stays(self):
        v = 20.0
        h = setpoint_gap(v, POLICY)
        par = VehicleParams(tau=0.13, alpha=0.2, beta=0.4, kind="HV")
        s = step_hv(VehicleState(0.0, v, 0.0), h, v, par, POLICY, 0.05)
        assert s.v == v and s.a == pytest.approx(0.0, abs=1e-12)

    def test_hv_rejects_av_parameters(self):
        with pytest.raises(ValueError):
            step_hv(VehicleState(0.0, 1.0), 10.0, 1.0, VehicleParams(tau=0.1), POLICY, 0.05)

    def test_collision_detected(self, scenario):
        states = list(scenario.initial_states)
        states[-1] = VehicleState(states[-2].p + 1.0, 10.0)
        with pytest.raises(CollisionError) as err:
            step_platoon(states, 0.0, 0.0, scenario, step=7)
        assert err.value.step == 7 and err.value.vehicle == scenario.n

    def test_leader_control_saturates(self):
        assert leader_control(VehicleState(0.0, 0.0), 100.0) == 4.0
        assert leader_control(VehicleState(0.0, 30.0), 0.0) == -4.0


class TestScenario:
    def test_default_has_six_vehicles(self, scenario):
        assert scenario.n == 5 and scenario.n_x == 15
        assert [v.kind for v in scenario.vehicles] == ["AV", "HV", "HV", "HV", "HV", "AV"]

    def test_json_round_trip(self, scenario, tmp_path):
        path = save_scenario(scenario, tmp_path / "s.json")
        again = load_scenario(path)
        assert again.to_dict() == scenario.to_dict()
        assert again.digest() == scenario.digest()

    def test_structure_validated(self, scenario):
        d = scenario.to_dict()
        d["vehicles"][0]["kind"] = "HV"
        with pytest.raises(ValueError):
            PlatoonScenario.from_dict(d)

    def test_overlapping_initial_positions_rejected(self, scenario):
        d = scenario.to_dict()
        d["initial_states"][1][0] = d["initial_states"][0][0]
        with pytest.raises(ValueError):
            PlatoonScenario.from_dict(d)


class TestErrorCoordinates:
    def test_rear_gap_measured_against_d_safe(self, scenario):
        x = platoon_errors(scenario.initial_states, scenario.v_star, scenario.policy, scenario.d_safe)
        h = gaps(scenario.initial_states)
        assert x[-3] == pytest.approx(h[-1] - scenario.d_safe)
        assert x[0] == pytest.approx(h[0] - setpoint_gap(scenario.v_star, scenario.policy))

    def test_structural_matrices(self):
        B = input_matrix(5, 0.12, 0.05)
        assert B.shape == (15, 1) and B[-1, 0] == pytest.approx(0.05 / 0.12) and np.count_nonzero(B) == 1
        D = disturbance_matrix(5, 0.05)
        assert D[0, 0] == D[2, 1] == 0.05 and np.count_nonzero(D) == 2
        C = rear_selector(5)
        assert np.array_equal(C[:, -3:], np.eye(3)) and np.count_nonzero(C) == 3

    def test_nonlinear_step_matches_linear_model_near_equilibrium(self, scenario):
        """Small perturbations propagate through the stacked linear model."""
        model = build_true_error_model(scenario)
        v = scenario.v_star
        h_star = setpoint_gap(v, scenario.policy)
        p = [0.0]
        for i in range(1, scenario.n + 1):
            p.append(p[-1] - (scenario.d_safe if i == scenario.n else h_star))
        rng = np.random.default_rng(1)
        states = [VehicleState(pi + 1e-4 * rng.standard_normal(), v + 1e-4 * rng.standard_normal())
                  for pi in p]
        x = platoon_errors(states, v, scenario.policy, scenario.d_safe)
        nxt = step_platoon(states, 0.0, 0.01, scenario)
        x1 = platoon_errors(nxt, v, scenario.policy, scenario.d_safe)
        w = np.array([states[0].v - v, 0.0])
        w[1] = scenario.vehicles[1].beta * w[0] / scenario.vehicles[1].tau
        pred = model.step(x, 0.01, w)
        assert np.max(np.abs(x1 - pred)) < 1e-7


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_positions_integrate_velocities(seed):
    scenario = default_scenario()
    rng = np.random.default_rng(seed)
    states = list(scenario.initial_states)
    for _ in range(50):
        nxt = step_platoon(states, float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), scenario)
        for a, b in zip(states, nxt):
            assert math.isclose(b.p, a.p + scenario.t_s * a.v, abs_tol=1e-9)
        states = nxt
