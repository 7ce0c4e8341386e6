import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from platoonlab.exceptions import Infeasible
from platoonlab.mpc import (
    ConstraintSets,
    MPCConfig,
    OffsetFreeMPC,
    SteadyStateTarget,
    dual_loop_control,
    mpc_cost,
    mpc_fallback,
    mpc_qp,
    solve_mpc,
    solve_steady_state_target,
    target_equations,
)
from platoonlab.numerics import spectral_radius

ZERO_TARGET = SteadyStateTarget(np.zeros(15), 0.0)


@pytest.fixture(scope="module")
def model(synthesis):
    return synthesis["model"]


@pytest.fixture(scope="module")
def K(synthesis):
    return synthesis["gain"].K


def _cfg(model, **kw):
    return MPCConfig(**kw).with_terminal(model)


def _xi(x, w1=(0.0, 0.0), w2=(0.0, 0.0)):
    return np.concatenate([x, w1, w2])


def _rear_state(h=0.0, v=0.0, a=0.0):
    x = np.zeros(15)
    x[-3:] = (h, v, a)
    return x


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            MPCConfig(N=0)
        with pytest.raises(ValueError):
            MPCConfig(R=0.0)
        with pytest.raises(ValueError):
            ConstraintSets(h_tilde_max=-1.0)

    def test_terminal_weight_solves_riccati(self, model):
        cfg = _cfg(model)
        P, A, B, R = cfg.P_terminal, model.A_bar, model.B, np.eye(1)
        Q = 10.0 * np.eye(15)
        AtPB = A.T @ P @ B
        res = A.T @ P @ A - AtPB @ np.linalg.solve(B.T @ P @ B + R, AtPB.T) + Q - P
        assert np.max(np.abs(res)) <= 1e-8 * np.max(np.abs(P))


class TestTarget:
    def test_zero_disturbance_gives_origin(self, model):
        t = solve_steady_state_target(model, np.zeros(2), _cfg(model))
        assert np.array_equal(t.x_bar, np.zeros(15)) and t.u_bar == 0.0 and not t.fallback

    def test_equilibrium_rows_hold(self, model):
        d_hat = np.array([1e-3, 0.0])
        cfg = _cfg(model)
        t = solve_steady_state_target(model, d_hat, cfg)
        assert not t.fallback
        E, e = target_equations(model, d_hat, cfg.sets.selector(15))
        z = np.concatenate([t.x_bar, [t.u_bar]])
        assert np.max(np.abs(E[:15] @ z - e[:15])) <= 1e-6
        assert np.all(np.abs(cfg.sets.selector(15) @ t.x_bar) <= cfg.sets.x_max + 1e-9)

    def test_nonzero_disturbance_moves_input(self, model):
        t = solve_steady_state_target(model, np.array([1e-3, 0.0]), _cfg(model))
        # regression value recorded from the default collection run
        assert t.u_bar == pytest.approx(1.11745, rel=1e-3)

    def test_wrong_dimension(self, model):
        with pytest.raises(ValueError):
            solve_steady_state_target(model, np.zeros(3), _cfg(model))

    def test_unreachable_target_falls_back_to_origin(self, model):
        t = solve_steady_state_target(model, np.array([50.0, 30.0]), _cfg(model))
        assert t.fallback and not np.any(t.x_bar) and t.u_bar == 0.0


class TestMPC:
    def test_origin_gives_zero_correction(self, model, K):
        sol = solve_mpc(_xi(np.zeros(15)), ZERO_TARGET, K, model, _cfg(model))
        np.testing.assert_allclose(sol.c, 0.0, atol=1e-8)

    @pytest.mark.parametrize("N", [2, 8])
    def test_unconstrained_matches_lqr(self, model, K, N):
        big = ConstraintSets(u_max=1e6, h_tilde_max=1e6, v_tilde_max=1e6)
        cfg = _cfg(model, N=N, sets=big)
        x = _rear_state(1.0, -0.5, 0.1)
        sol = solve_mpc(_xi(x), ZERO_TARGET, K, model, cfg)
        P, B = cfg.P_terminal, model.B
        lqr = -np.linalg.solve(B.T @ P @ B + cfg.R, B.T @ P @ model.A_bar) @ x
        assert sol.c[0] == pytest.approx(float(lqr[0]), abs=1e-3)

    def test_active_input_constraint(self, model, K):
        cfg = _cfg(model)
        x = _rear_state(15.0, -8.0, -1.0)
        sol = solve_mpc(_xi(x), ZERO_TARGET, K, model, cfg, x_meas=x)
        u = sol.c[0] + float(K.ravel() @ x)
        assert abs(u) == pytest.approx(cfg.sets.u_max, abs=1e-6)

    def test_predictions_respect_constraints(self, model, K):
        cfg = _cfg(model)
        x = _rear_state(5.0, -2.0, 0.5)
        sol = solve_mpc(_xi(x), ZERO_TARGET, K, model, cfg, x_meas=x)
        C = cfg.sets.selector(15)
        for j in range(1, cfg.N + 1):
            assert np.all(np.abs(C @ sol.x_pred[j]) <= cfg.sets.x_max + 1e-6)
        for j in range(cfg.N):
            xj = x if j == 0 else sol.x_pred[j]
            assert abs(sol.c[j] + K.ravel() @ xj) <= cfg.sets.u_max + 1e-6

    def test_condensed_cost_matches_forward_simulation(self, model, K):
        cfg = _cfg(model, N=4)
        xi = _xi(_rear_state(2.0, -1.0, 0.2), (1e-3, 0.0), (0.0, 1e-4))
        target = SteadyStateTarget(0.01 * np.ones(15), 0.05)
        c = np.array([0.3, -0.1, 0.2, 0.05])
        qp, F, Gm, const = mpc_qp(xi, target, K, model, cfg)
        condensed = 0.5 * c @ qp.H @ c + qp.f @ c + const
        assert condensed == pytest.approx(mpc_cost(c, xi, target, model, cfg), rel=1e-9)

    def test_repeatable(self, model, K):
        cfg = _cfg(model)
        xi = _xi(_rear_state(3.0, 1.0, 0.0), (1e-3, 0.0))
        a = solve_mpc(xi, ZERO_TARGET, K, model, cfg).c
        b = solve_mpc(xi, ZERO_TARGET, K, model, cfg).c
        np.testing.assert_array_equal(a, b)

    @settings(max_examples=15, deadline=None)
    @given(st.floats(-10, 10), st.floats(-5, 5), st.integers(0, 2 ** 16))
    def test_first_order_optimality(self, model, K, h, v, seed):
        cfg = _cfg(model)
        xi = _xi(_rear_state(h, v, 0.0))
        try:
            sol = solve_mpc(xi, ZERO_TARGET, K, model, cfg, x_meas=xi[:15])
        except Infeasible:
            return
        qp = mpc_qp(xi, ZERO_TARGET, K, model, cfg, xi[:15])[0]
        J0 = mpc_cost(sol.c, xi, ZERO_TARGET, model, cfg)
        rng = np.random.default_rng(seed)
        for _ in range(10):
            d = rng.standard_normal(cfg.N)
            c = sol.c + 1e-3 * d / np.linalg.norm(d)
            r = qp.A_in @ c
            if np.all(r >= qp.lb - 1e-12) and np.all(r <= qp.ub + 1e-12):
                assert mpc_cost(c, xi, ZERO_TARGET, model, cfg) >= J0 - 1e-8

    def test_initial_state_outside_box_is_infeasible(self, model, K):
        with pytest.raises(Infeasible):
            solve_mpc(_xi(_rear_state(100.0)), ZERO_TARGET, K, model, _cfg(model))


class TestDualLoop:
    def test_sum_and_clamp(self):
        sets = ConstraintSets()
        K = np.array([[1.0, 2.0]])
        assert dual_loop_control([0.5, 0.25], 0.5, K, sets) == pytest.approx(1.5)
        trip = []
        assert dual_loop_control([10.0, 0.0], 0.0, K, sets, trip) == 4.0
        assert trip == [10.0]

    def test_fallback_uses_shifted_plan_when_consistent(self):
        sets = ConstraintSets()
        K = np.array([[1.0]])
        assert mpc_fallback(np.array([0.1, 0.2]), K, [1.0], sets) == 0.2
        assert mpc_fallback(np.array([0.1, 5.0]), K, [1.0], sets) == 0.0
        assert mpc_fallback(None, K, [1.0], sets) == 0.0
        assert mpc_fallback(np.array([0.1]), K, [1.0], sets) == 0.0

    def test_estimator_records_telemetry(self, model, K):
        ctrl = OffsetFreeMPC().fit(model)
        x = _rear_state(1.0, 0.0, 0.0)
        u_hat = ctrl.predict(_xi(x), K, x_meas=x)
        info = ctrl.last_info_
        assert info["status"] and not info["fallback"] and info["solve_time"] > 0
        assert abs(u_hat + float(K.ravel() @ x)) <= 4.0 + 1e-6

    def test_estimator_falls_back_outside_box(self, model, K):
        ctrl = OffsetFreeMPC().fit(model)
        x = _rear_state(100.0)
        ctrl.predict(_xi(x), K, x_meas=x)
        assert ctrl.last_info_["fallback"]


def test_terminal_closed_loop_is_stable(model):
    cfg = _cfg(model)
    P, B = cfg.P_terminal, model.B
    F = np.linalg.solve(B.T @ P @ B + cfg.R, B.T @ P @ model.A_bar)
    assert spectral_radius(model.A_bar - B @ F) < 1
