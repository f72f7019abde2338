import numpy as np
import pytest

from cips.core import RngStream
from cips.exceptions import ConvergenceError, FilterDivergenceError
from cips.kalman import (
    control_riccati_rhs,
    kalman_bucy_run,
    lqr_gain,
    solve_are,
    solve_dre_backward,
    solve_dual_dre,
)
from cips.models import (
    LQProblem,
    ObservationPath,
    make_linear_gaussian,
    make_lq_canonical,
    make_static_param,
)


def scalar_lq(a, b, c, r=1.0, p_T=1.0, horizon=10.0):
    A = np.array([[float(a)]])
    B = np.array([[float(b)]])
    C = np.array([[float(c)]])
    return LQProblem(
        dim_state=1,
        dim_input=1,
        dynamics=lambda x, u: A @ np.atleast_1d(x) + B @ np.atleast_1d(u),
        cost_output=lambda x: C @ np.atleast_1d(x),
        R=np.array([[float(r)]]),
        P_T=np.array([[float(p_T)]]),
        horizon=horizon,
        A=A,
        B=B,
        C=C,
    )


class TestKalmanBucy:
    def test_static_posterior_small_dt(self):
        # Z_1 = 1 with sigma0 = sigma_w = 1 gives m_1 = Sigma_1 = 1/2
        model = make_static_param(1, 1.0, 1.0)
        dt = 1e-4
        obs = ObservationPath(dt=dt, increments=np.full((int(1 / dt), 1), dt))
        path = kalman_bucy_run(model, obs)
        assert path.terminal.mean[0] == pytest.approx(0.5, abs=1e-3)
        assert path.terminal.cov[0, 0] == pytest.approx(0.5, abs=1e-3)

    def test_zero_observation_matrix_reduces_to_moment_odes(self):
        # H = 0: gain vanishes, moments follow dm = Am dt, dS = 2aS + q dt
        a, q = -1.0, 0.36
        model = make_linear_gaussian([[a]], [[0.0]], [[0.6]], [2.0], [[1.0]])
        dt = 1e-4
        obs = ObservationPath(dt=dt, increments=RngStream(0).standard_normal((10_000, 1)))
        path = kalman_bucy_run(model, obs)
        t = 1.0
        mean_exact = 2.0 * np.exp(a * t)
        var_exact = -q / (2 * a) + (1.0 + q / (2 * a)) * np.exp(2 * a * t)
        assert path.terminal.mean[0] == pytest.approx(mean_exact, rel=1e-3)
        assert path.terminal.cov[0, 0] == pytest.approx(var_exact, rel=1e-3)

    def test_scalar_riccati_closed_form(self):
        # A=0, H=1, sigma_B=0, Sigma_0=1: Sigma_t = 1/(1+t)
        model = make_linear_gaussian([[0.0]], [[1.0]], [[0.0]], [0.0], [[1.0]])
        dt = 1e-4
        obs = ObservationPath(dt=dt, increments=np.zeros((int(2 / dt), 1)))
        path = kalman_bucy_run(model, obs)
        for k in (5000, 10000, 20000):
            t = k * dt
            assert path.covs[k][0, 0] == pytest.approx(1.0 / (1.0 + t), abs=1e-3)

    def test_covariance_pd_loss_reports_step(self):
        model = make_linear_gaussian([[0.0]], [[1.0]], [[0.0]], [0.0], [[1.0]])
        obs = ObservationPath(dt=3.0, increments=np.zeros((2, 1)))
        with pytest.raises(FilterDivergenceError, match="step 1"):
            kalman_bucy_run(model, obs)

    def test_requires_linear_descriptor(self):
        from cips.models import FilterModel

        model = FilterModel(
            dim_state=1, dim_obs=1,
            drift=lambda x: np.zeros_like(x),
            diffusion=lambda x: np.zeros((1, 1)),
            observation=lambda x: x,
            sample_prior=lambda r, n: r.standard_normal((n, 1)),
        )
        obs = ObservationPath(dt=0.1, increments=np.zeros((1, 1)))
        with pytest.raises(ValueError, match="linear descriptor"):
            kalman_bucy_run(model, obs)


class TestValueRiccati:
    def test_scalar_stationary_point(self):
        # A=0, B=C=R=P_T=1: 1 - P^2 = 0 and P_T = 1, so P stays exactly 1
        path = solve_dre_backward(scalar_lq(0, 1, 1), dt=0.02)
        assert np.abs(path.values - 1.0).max() <= 1e-12

    def test_zero_cost_zero_terminal(self):
        lq = scalar_lq(0.5, 1.0, 0.0, p_T=1e-12)
        path = solve_dre_backward(lq, dt=0.02)
        assert np.abs(path.values).max() <= 1e-6

    def test_canonical_d2_converges_to_are(self):
        lq = make_lq_canonical(2, RngStream(0))
        path = solve_dre_backward(lq, dt=0.01)
        P_inf = solve_are(lq)
        assert np.linalg.norm(path.initial - P_inf, "fro") <= 1e-6

    def test_oracle_only_matches_explicit(self):
        lq = make_lq_canonical(3, RngStream(2))
        a = solve_dre_backward(lq, dt=0.02)
        b = solve_dre_backward(lq, dt=0.02, oracle_only=True)
        assert np.abs(a.values - b.values).max() <= 1e-12


class TestARE:
    def test_scalar_unit(self):
        P = solve_are(scalar_lq(0, 1, 1))
        assert P[0, 0] == pytest.approx(1.0, abs=1e-8)

    def test_stable_zero_cost(self):
        P = solve_are(scalar_lq(-1, 1, 0))
        assert abs(P[0, 0]) <= 1e-8

    def test_residual_canonical_d2(self):
        lq = make_lq_canonical(2, RngStream(42))
        P = solve_are(lq)
        resid = control_riccati_rhs(P, lq.A, lq.B, lq.C, lq.R)
        assert np.linalg.norm(resid, "fro") <= 1e-8

    def test_closed_loop_stable(self):
        for d in (2, 3, 5):
            lq = make_lq_canonical(d, RngStream(50 + d))
            P = solve_are(lq)
            K = lqr_gain(lq, P)
            eigs = np.linalg.eigvals(lq.A + lq.B @ K)
            assert np.max(eigs.real) < 0

    def test_unstabilizable_raises(self):
        # unstable and uncontrollable: P blows up, no stationary point
        lq = scalar_lq(1.0, 0.0, 1.0)
        with pytest.raises(ConvergenceError):
            solve_are(lq, dt=0.05)


class TestDualRiccati:
    def test_scalar_stationary(self):
        path = solve_dual_dre(scalar_lq(0, 1, 1), dt=0.02)
        assert np.abs(path.values - 1.0).max() <= 1e-12

    def test_constant_when_uncoupled(self):
        # A = 0, B = 0, C = 0, P_T = 2I: S stays exactly at 1/2
        lq = scalar_lq(0.0, 0.0, 0.0, p_T=2.0)
        path = solve_dual_dre(lq, dt=0.02)
        assert np.abs(path.values - 0.5).max() <= 1e-12

    def test_duality_with_value_riccati(self):
        for d in (2, 4, 6):
            lq = make_lq_canonical(d, RngStream(200 + d))
            dt = 0.01
            S = solve_dual_dre(lq, dt)
            P = solve_dre_backward(lq, dt)
            worst = max(
                np.linalg.norm(S.values[k] @ P.values[k] - np.eye(d), "fro")
                for k in range(0, S.values.shape[0], 50)
            )
            assert worst <= 1e-6

    def test_exponential_forgetting_of_terminal_condition(self):
        # ||P_t - P_inf|| decreases in T - t beyond a transient; with complex
        # closed-loop poles the decay can ripple, so strict monotonicity is
        # asserted on instances with monotone decay and the decay magnitude
        # on all of them.
        for seed, strict in ((9, True), (42, True), (7, False)):
            lq = make_lq_canonical(3, RngStream(seed))
            path = solve_dre_backward(lq, dt=0.01)
            P_inf = solve_are(lq)
            dev = np.linalg.norm(path.values - P_inf, axis=(1, 2))
            assert dev[0] <= 1e-2 * dev[-1]
            if strict:
                assert np.all(np.diff(dev[: int(0.8 * len(dev))]) >= -1e-12)
