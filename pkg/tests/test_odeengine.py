import numpy as np
import pytest

from mrkf import adm1r3
from mrkf.odeengine import (COV_DIAG_CEILING, DivergenceError, InputSchedule,
                            IvpProblem, integrate_piecewise, propagate_joint,
                            solve_ivp_problem)

from conftest import rk4_fixed


def const_schedule(t0, t1, feed, xi=None):
    return InputSchedule([(t0, t1, feed, xi)])


class TestSolveIvp:
    def test_zero_dynamics_stays_constant(self):
        prob = IvpProblem(rhs=lambda t, x, u: np.zeros_like(x),
                          t0=0.0, t1=3.0, x0=np.array([1.0, 2.0]))
        traj = solve_ivp_problem(prob)
        assert np.allclose(traj(1.7), [1.0, 2.0], atol=1e-12)
        assert np.allclose(traj.x_end, [1.0, 2.0], atol=1e-12)

    def test_scalar_exponential_decay(self):
        prob = IvpProblem(rhs=lambda t, x, u: -x, t0=0.0, t1=1.0,
                          x0=np.array([1.0]))
        traj = solve_ivp_problem(prob)
        assert abs(traj.x_end[0] - np.exp(-1.0)) < 1e-4

    def test_adm1_matches_fixed_step_oracle(self, model, steady_state_nominal):
        # RK4 stability bound: the fastest dissociation mode relaxes at
        # ~1.7e5/d, so the oracle step must stay below ~1.6e-5 d, and the
        # start state must sit on the dissociation equilibrium (an
        # imbalanced start excites a ~5e7/d pH transient no fixed step
        # survives; the adaptive L-stable solver handles it)
        x0 = steady_state_nominal
        prob = IvpProblem(rhs=lambda t, x, u: model.rhs(x, u),
                          jacobian=lambda t, x, u: model.jacobian_rhs(x, u),
                          t0=0.0, t1=0.5, x0=x0, rtol=1e-6, atol=1e-9,
                          nonnegative_mask=np.ones(14, dtype=bool))
        traj = solve_ivp_problem(prob, u=0.0)
        ref = rk4_fixed(lambda t, x: model.rhs(x, 0.0), x0, 0.0, 0.5, 1e-5)
        rel = np.abs(traj.x_end - ref) / np.maximum(np.abs(ref), 1e-12)
        assert rel.max() < 1e-3

    def test_blowup_signals_divergence(self):
        prob = IvpProblem(rhs=lambda t, x, u: x * x, t0=0.0, t1=5.0,
                          x0=np.array([1.0]))
        with pytest.raises(DivergenceError):
            solve_ivp_problem(prob)

    def test_tolerance_self_convergence(self, model):
        x0 = adm1r3.seed_state()
        results = {}
        for f in (1.0, 0.5):
            prob = IvpProblem(rhs=lambda t, x, u: model.rhs(x, u),
                              jacobian=lambda t, x, u: model.jacobian_rhs(x, u),
                              t0=0.0, t1=0.5, x0=x0,
                              rtol=1e-4 * f, atol=1e-7 * f)
            results[f] = solve_ivp_problem(prob, u=20.0).x_end
        scale = np.maximum(np.abs(results[1.0]), 1.0)
        assert np.max(np.abs(results[1.0] - results[0.5]) / scale) < 1e-4

    def test_nonnegative_mask_is_exact(self):
        # linear decay through zero: unmasked solution goes negative
        prob = IvpProblem(rhs=lambda t, x, u: np.array([-1.0]),
                          t0=0.0, t1=2.0, x0=np.array([1.0]),
                          nonnegative_mask=np.array([True]))
        traj = solve_ivp_problem(prob)
        ts = np.linspace(0.0, 2.0, 101)
        vals = traj(ts)[:, 0]
        assert vals.min() >= 0.0

    def test_validation(self):
        with pytest.raises(ValueError):
            IvpProblem(rhs=lambda t, x, u: x, t0=1.0, t1=0.0, x0=np.ones(1))
        with pytest.raises(ValueError):
            IvpProblem(rhs=lambda t, x, u: x, t0=0.0, t1=1.0, x0=np.ones(1),
                       rtol=-1.0)


class TestPiecewise:
    def test_single_interval_equals_solve_ivp(self, model):
        x0 = adm1r3.seed_state()
        prob = IvpProblem(rhs=lambda t, x, u: model.rhs(x, u),
                          jacobian=lambda t, x, u: model.jacobian_rhs(x, u),
                          t0=0.0, t1=0.25, x0=x0)
        direct = solve_ivp_problem(prob, u=30.0).x_end
        sched = const_schedule(0.0, 0.25, 30.0)
        assert np.allclose(integrate_piecewise(prob, sched).x_end, direct,
                           rtol=1e-9, atol=1e-12)

    def test_two_equal_intervals_continuous(self, model):
        x0 = adm1r3.seed_state()
        prob = IvpProblem(rhs=lambda t, x, u: model.rhs(x, u),
                          jacobian=lambda t, x, u: model.jacobian_rhs(x, u),
                          t0=0.0, t1=0.5, x0=x0, rtol=1e-8, atol=1e-11)
        one = integrate_piecewise(prob, const_schedule(0.0, 0.5, 30.0)).x_end
        two = integrate_piecewise(
            prob, InputSchedule([(0.0, 0.25, 30.0, None),
                                 (0.25, 0.5, 30.0, None)])).x_end
        rel = np.abs(one - two) / np.maximum(np.abs(one), 1e-12)
        assert rel.max() < 1e-6

    def test_feeding_pulse_not_skipped(self, model, steady_state_nominal):
        # 15-minute pulse inside a one-hour step
        x0 = steady_state_nominal
        pulse_rate = 300.0
        h = 1.0 / 24.0
        p0, p1 = 10.0 / 24.0, 10.25 / 24.0
        sched = InputSchedule([(9.0 / 24.0, p0, 0.0, None),
                               (p0, p1, pulse_rate, None),
                               (p1, 10.0 / 24.0 + h, 0.0, None)])
        prob = IvpProblem(rhs=lambda t, x, u: model.rhs(x, u),
                          jacobian=lambda t, x, u: model.jacobian_rhs(x, u),
                          t0=9.0 / 24.0, t1=10.0 / 24.0 + h, x0=x0,
                          rtol=1e-10, atol=1e-13)
        with_pulse = integrate_piecewise(prob, sched).x_end
        naive = solve_ivp_problem(prob, u=0.0).x_end  # skips the pulse
        assert np.max(np.abs(with_pulse - naive)) > 1e-4

        # fixed-step oracle resolving the pulse
        def rhs_t(t, x):
            return model.rhs(x, pulse_rate if p0 <= t < p1 else 0.0)
        x_mid = rk4_fixed(rhs_t, x0, 9.0 / 24.0, p0, 1e-5)
        x_mid = rk4_fixed(rhs_t, x_mid, p0, p1, 1e-6)
        ref = rk4_fixed(rhs_t, x_mid, p1, 10.0 / 24.0 + h, 1e-5)
        rel = np.abs(with_pulse - ref) / np.maximum(np.abs(ref), 1e-9)
        assert rel.max() < 1e-6

    def test_piecewise_vs_monolithic_constant_input(self, model):
        x0 = adm1r3.seed_state()
        rtol = 1e-6
        prob = IvpProblem(rhs=lambda t, x, u: model.rhs(x, u),
                          jacobian=lambda t, x, u: model.jacobian_rhs(x, u),
                          t0=0.0, t1=1.0, x0=x0, rtol=rtol, atol=1e-9)
        mono = solve_ivp_problem(prob, u=25.0).x_end
        pieces = InputSchedule([(k / 8.0, (k + 1) / 8.0, 25.0, None)
                                for k in range(8)])
        split = integrate_piecewise(prob, pieces).x_end
        rel = np.abs(mono - split) / np.maximum(np.abs(mono), 1e-12)
        assert rel.max() < 10 * rtol

    def test_schedule_validation(self):
        with pytest.raises(ValueError):
            InputSchedule([(0.0, 1.0, 5.0, None), (1.5, 2.0, 5.0, None)])
        with pytest.raises(ValueError):
            InputSchedule([(0.0, 1.0, -5.0, None)])
        sched = const_schedule(0.0, 1.0, 5.0)
        with pytest.raises(ValueError):
            sched.slice(0.5, 2.0)


class TestPropagateJoint:
    def test_frozen_covariance(self):
        x1, P1 = propagate_joint(
            f=lambda x, u: np.zeros_like(x), F=lambda x, u: np.zeros((2, 2)),
            Q=np.zeros((2, 2)), x0=np.array([1.0, -1.0]),
            P0=np.array([[2.0, 0.5], [0.5, 1.0]]),
            intervals=[(0.0, 1.0, 0.0)])
        assert np.allclose(x1, [1.0, -1.0], atol=1e-12)
        assert np.allclose(P1, [[2.0, 0.5], [0.5, 1.0]], atol=1e-9)

    @pytest.mark.parametrize("a,q,p0", [(-0.8, 0.3, 1.5), (0.4, 0.05, 0.2)])
    def test_scalar_riccati_analytic(self, a, q, p0):
        # dP/dt = 2aP + q  ->  P(t) = (P0 + q/(2a)) e^{2at} - q/(2a)
        t1 = 0.7
        x1, P1 = propagate_joint(
            f=lambda x, u: a * x, F=lambda x, u: np.array([[a]]),
            Q=np.array([[q]]), x0=np.array([1.0]), P0=np.array([[p0]]),
            intervals=[(0.0, t1, 0.0)], rtol=1e-9, atol=1e-12)
        expected = (p0 + q / (2 * a)) * np.exp(2 * a * t1) - q / (2 * a)
        assert abs(P1[0, 0] - expected) < 1e-6
        assert abs(x1[0] - np.exp(a * t1)) < 1e-6

    def test_adm1_hour_step_symmetric_psd(self, model, maps, table_state):
        hooks_f = lambda x, u: (1 / maps.T_x) * model.rhs(maps.T_x * x, u)
        hooks_F = lambda x, u: ((1 / maps.T_x)[:, None]
                                * model.jacobian_rhs(maps.T_x * x, u)
                                * maps.T_x[None, :])
        x0 = maps.normalize_x(table_state)
        x1, P1 = propagate_joint(hooks_f, hooks_F, np.zeros((14, 14)),
                                 x0, np.eye(14), [(0.0, 1.0 / 24.0, 29.821)])
        assert np.all(np.isfinite(P1))
        assert np.max(np.abs(P1 - P1.T)) <= 1e-10
        assert np.linalg.eigvalsh(P1).min() >= -1e-10

    def test_transition_matrix_linear(self):
        A = np.array([[0.0, 1.0], [-2.0, -0.3]])
        x1, P1, Phi = propagate_joint(
            f=lambda x, u: A @ x, F=lambda x, u: A, Q=np.zeros((2, 2)),
            x0=np.array([1.0, 0.0]), P0=np.eye(2),
            intervals=[(0.0, 0.5, 0.0)], rtol=1e-10, atol=1e-13,
            with_transition=True)
        from scipy.linalg import expm
        assert np.allclose(Phi, expm(0.5 * A), atol=1e-7)

    def test_covariance_ceiling(self):
        with pytest.raises(DivergenceError):
            propagate_joint(
                f=lambda x, u: x, F=lambda x, u: np.array([[1.0]]),
                Q=np.array([[0.0]]), x0=np.array([1.0]),
                P0=np.array([[2 * COV_DIAG_CEILING]]),
                intervals=[(0.0, 0.1, 0.0)])
