import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from volterralift.control import (
    ControlProblem,
    FeatureMap,
    Policy,
    ProblemError,
    RegressionError,
    bsde_solve,
    closed_loop_simulate,
    controlled_simulate,
    cost_evaluate,
    feedback_policy,
    fit_linear,
    fundamental_relation_check,
    hamiltonian,
    hamiltonian_batch,
    lipschitz_constant,
    reweighted_cost,
    simulate_ensemble,
)
from volterralift.kernel import kernel_eval, make_atomic
from volterralift.levy import IntensityBoundError, LevyModel
from volterralift.lift import CoefficientSet, LiftState, LiftTrajectory, simulate_lift

ONE = LevyModel(np.array([[1.0]]), np.array([1.0]))


def problem(*, costs=(0.0, 0.0), rho=((1.0,), (1.0,)), levy=ONE, sigma=0.0, f=0.0, g=None, y0=0.0,
            atoms=((1.0, 2.0), (2.0, 3.0)), M=20, T=1.0, bound=None, running=None):
    costs = np.asarray(costs, dtype=float)
    R = np.asarray(rho, dtype=float)
    m = make_atomic(list(atoms))
    coeffs = CoefficientSet(lambda t, u: f * u, lambda t, xi, u: np.broadcast_to(sigma * xi, u.shape))
    return ControlProblem(
        m, coeffs, levy, y0, np.linspace(0, T, M + 1), list(range(costs.size)),
        lambda t, u, i, a: R[a, i], bound if bound is not None else float(R.max()),
        running or (lambda t, u, a: costs[a]),
        g or (lambda u: np.zeros(u.shape[0])),
    )


def state_independent(M=50):
    c = np.array([0.7, 0.3, 0.5])
    levy = LevyModel(np.array([[1.0], [-0.5]]), np.array([1.0, 2.0]))
    rho = [[1.5, 0.5], [0.5, 1.5], [1.0, 1.0]]
    return problem(costs=c, rho=rho, levy=levy, sigma=0.2, f=-0.3, y0=0.4, M=M,
                   g=lambda u: np.full(u.shape[0], 1.25)), c, 1.25


class TestHamiltonian:
    def test_zero_z(self):
        p = problem(costs=(1.0, 0.0))
        assert hamiltonian(0.0, [0.0], [0.0], p) == (0.0, 1)

    def test_two_term_enumeration(self):
        p = problem(costs=(0.0, 0.0), rho=((2.0,), (1.0,)))
        assert hamiltonian(0.0, [0.0], [-2.0], p) == (-2.0, 0)

    def test_tie_lowest_index(self):
        p = problem(costs=(0.5, 0.5, 0.5), rho=((1.0,), (1.0,), (1.0,)))
        assert hamiltonian(0.0, [0.0], [3.0], p)[1] == 0

    def test_z_shape_checked(self):
        with pytest.raises(ProblemError):
            hamiltonian(0.0, [0.0], [1.0, 2.0], problem())

    def test_empty_action_set(self):
        with pytest.raises(ProblemError):
            problem(costs=())

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_lipschitz_bound(self, seed):
        rng = np.random.default_rng(seed)
        n_marks, n_act = rng.integers(1, 5), rng.integers(1, 6)
        levy = LevyModel(rng.normal(size=(n_marks, 1)) + 3.0, rng.uniform(0.1, 3.0, n_marks))
        Cr = 2.5
        R = rng.uniform(0.05, Cr, (n_act, n_marks))
        p = problem(costs=rng.normal(size=n_act), rho=R, levy=levy, bound=Cr)
        L = lipschitz_constant(p)
        lam = levy.rates
        z = rng.normal(0, 5, (1000, n_marks))
        z2 = rng.normal(0, 5, (1000, n_marks))
        u = rng.normal(size=(1000, 1))
        h1, _, _ = hamiltonian_batch(p, 0.3, u, z)
        h2, _, _ = hamiltonian_batch(p, 0.3, u, z2)
        dist = np.sqrt(np.sum((z - z2) ** 2 * lam, axis=1))
        assert np.all(np.abs(h1 - h2) <= L * dist + 1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=4))
    def test_dominance(self, z1):
        p = problem(costs=(0.2, -0.1, 0.4), rho=((2.0,), (0.5,), (1.0,)))
        val, arg = hamiltonian(0.0, [0.0], [z1[0]], p)
        for a, (c, r) in enumerate(zip((0.2, -0.1, 0.4), (2.0, 0.5, 1.0))):
            assert val <= c + z1[0] * (r - 1.0) + 1e-15
        assert arg in (0, 1, 2)


class TestProblem:
    def test_validate_bound(self):
        p = problem(rho=((3.0,), (1.0,)), bound=2.0)
        with pytest.raises(IntensityBoundError, match="action"):
            p.validate()

    def test_alpha(self):
        with pytest.raises(ProblemError):
            ControlProblem(make_atomic([(1.0, 1.0)]), CoefficientSet(None, None), ONE, 0.0, np.linspace(0, 1, 3),
                           [0], None, 1.0, None, None, alpha=1.0)

    def test_policy_on_lift_state(self):
        m = make_atomic([(1.0, 1.0)])
        pol = Policy.feedback(lambda k, t, Y, u: (u[:, 0] > 0).astype(int))
        assert pol(0, 0.0, LiftState(np.array([[0.5]]), m)) == 1
        assert Policy.schedule([2, 0])(1, 0.5, LiftState(np.array([[0.5]]), m)) == 0


class TestControlledSimulation:
    def test_identity_tilt_matches_base(self, two_atom):
        p = problem(rho=((1.0,),), costs=(0.0,), sigma=0.3, f=-0.5, y0=0.1)
        ctl = simulate_ensemble(p, Policy.constant(0), 10_000, seed=1).u[-1, :, 0]
        base = simulate_ensemble(p, Policy.constant(0), 10_000, seed=2, measure="base").u[-1, :, 0]
        assert ks_2samp(ctl, base).pvalue > 0.01

    def test_no_jump_coefficient_no_effect(self):
        p = problem(rho=((2.0,), (0.5,)), sigma=0.0, f=-0.5, y0=0.3)
        a = simulate_ensemble(p, Policy.constant(0), 50, seed=3)
        b = simulate_ensemble(p, Policy.constant(1), 50, seed=3)
        np.testing.assert_array_equal(a.u, b.u)

    def test_mean_under_constant_tilt(self, two_atom):
        c, sig, lam, T = 1.6, 0.25, 2.0, 1.0
        levy = LevyModel(np.array([[1.0]]), np.array([lam]))
        p = problem(rho=((c,),), costs=(0.0,), sigma=sig, levy=levy, y0=0.5, M=40)
        uT = simulate_ensemble(p, Policy.constant(0), 20_000, seed=5).u[-1, :, 0]
        int_k = float(np.sum(two_atom.weights * (1 - np.exp(-two_atom.rates * T)) / two_atom.rates))
        expect = 0.5 * kernel_eval(two_atom, T) + (c - 1.0) * lam * sig * int_k
        assert abs(uT.mean() - expect) <= 3 * uT.std(ddof=1) / math.sqrt(uT.size)

    def test_single_path_matches_ensemble(self):
        p = problem(rho=((2.0,), (0.5,)), sigma=0.3, y0=0.1)
        pol = Policy.schedule(np.arange(20) % 2)
        ens = simulate_ensemble(p, pol, 5, seed=4, keep_states=True)
        cp = controlled_simulate(p, pol, seed=4, path_index=3)
        traj, path, weight = cp
        assert isinstance(traj, LiftTrajectory)
        np.testing.assert_array_equal(traj.u, ens.u[:, 3])
        np.testing.assert_array_equal(path.times, ens.events.path_at(3).times)
        assert weight.log_weight == pytest.approx(ens.log_weight[3], abs=1e-12)
        np.testing.assert_array_equal(cp.actions, ens.actions[:, 3])

    def test_lift_stepper_agrees_on_accepted_path(self):
        # the (r - 1) drift and the tilted compensator r * lambda sum to the base compensator
        p = problem(rho=((2.0,), (0.5,)), sigma=0.3, f=-0.5, y0=0.1)
        traj, path, _ = controlled_simulate(p, Policy.constant(1), seed=6, path_index=0)
        ref = simulate_lift(p.measure, p.coeffs, p.levy, path, p.grid, p.y0)
        np.testing.assert_allclose(traj.u, ref.u, atol=1e-13)

    def test_chunking_independent(self):
        p = problem(rho=((2.0,), (0.5,)), sigma=0.3, y0=0.1)
        a = simulate_ensemble(p, Policy.constant(0), 23, seed=8, chunk=5)
        b = simulate_ensemble(p, Policy.constant(0), 23, seed=8)
        np.testing.assert_array_equal(a.u, b.u)
        np.testing.assert_array_equal(a.log_weight, b.log_weight)


class TestCost:
    def test_terminal_constant(self):
        p = problem(g=lambda u: np.full(u.shape[0], 2.5), sigma=0.3)
        assert cost_evaluate(p, Policy.constant(0), 100, seed=0) == (2.5, 0.0)

    def test_unit_running_cost(self):
        p = problem(costs=(1.0, 1.0), sigma=0.3, T=1.5)
        J, se = cost_evaluate(p, Policy.constant(1), 100, seed=0)
        assert J == pytest.approx(1.5, rel=1e-14) and se < 1e-12

    def test_needs_two_paths(self):
        with pytest.raises(ValueError):
            cost_evaluate(problem(), Policy.constant(0), 1, seed=0)

    def test_reweighting_consistency(self):
        p = problem(costs=(0.0, 0.4), rho=((1.8,), (0.4,)), sigma=0.3, y0=0.2, g=lambda u: u[:, 0] ** 2)
        pol = Policy.schedule(np.r_[np.zeros(10, int), np.ones(10, int)])
        J1, s1 = cost_evaluate(p, pol, 100_000, seed=1)
        J2, s2 = reweighted_cost(p, pol, 100_000, seed=2)
        z = 2.576
        assert J1 - z * s1 <= J2 + z * s2 and J2 - z * s2 <= J1 + z * s1


class TestRegression:
    def test_exact_linear(self):
        rng = np.random.default_rng(0)
        X = np.c_[np.ones(200), rng.normal(size=(200, 2))]
        y = 1.0 + X[:, 1] * 2.0 - X[:, 2]
        fit = fit_linear(X, y)
        np.testing.assert_allclose(fit.predict(X), y, atol=1e-12)
        assert fit.ridge == 0.0

    def test_ridge_fallback_logged(self, caplog):
        rng = np.random.default_rng(0)
        x = rng.normal(size=100)
        X = np.c_[np.ones(100), x, 2.0 * x]
        with caplog.at_level(logging.INFO, logger="volterralift.control.bsde"):
            fit = fit_linear(X, x)
        assert fit.ridge > 0 and "ridge" in caplog.text
        np.testing.assert_allclose(fit.predict(X), x, atol=1e-6)

    def test_constant_columns_folded(self):
        X = np.c_[np.ones(10), np.full(10, 3.0)]
        fit = fit_linear(X, np.full(10, 2.0))
        np.testing.assert_allclose(fit.predict(X), 2.0)

    def test_feature_counts(self):
        assert FeatureMap("u", 3).n_features(5, 2) == 10
        assert FeatureMap("lift", 1).n_features(5, 2) == 11
        Y = np.random.default_rng(1).normal(size=(7, 5, 2))
        u = Y.sum(axis=1)
        assert FeatureMap("u+lift", 2)(Y, u).shape == (7, FeatureMap("u+lift", 2).n_features(5, 2))


@pytest.fixture(scope="module")
def solved():
    p, c, g0 = state_independent()
    return p, c, g0, bsde_solve(p, 10_000, seed=3)


class TestBsde:
    def test_theta0_closed_form(self, solved):
        p, c, g0, sol = solved
        assert abs(sol.theta0 - (g0 + p.T * c.min())) < 1e-6
        t = p.grid
        np.testing.assert_allclose(sol.theta_mean, g0 + (p.T - t) * c.min(), atol=1e-6)

    def test_z_vanishes(self, solved):
        p, _, _, sol = solved
        assert sol.z_square_sum < 1e-12

    def test_terminal_fit(self, solved):
        _, _, _, sol = solved
        assert sol.terminal_rmse < 1e-6

    def test_martingale_residual(self, solved):
        assert solved[3].martingale_ok()

    def test_feedback_constant_argmin(self, solved):
        p, c, _, sol = solved
        ens = simulate_ensemble(p, feedback_policy(sol), 500, seed=4)
        assert np.all(ens.actions == int(np.argmin(c)))

    def test_relation_check(self, solved):
        p, c, _, sol = solved
        rng = np.random.default_rng(11)
        schedules = [Policy.schedule(rng.integers(0, 3, 50), name=f"s{j}") for j in range(10)]
        pols = [Policy.constant(i, name=f"c{i}") for i in range(3)] + schedules + [feedback_policy(sol)]
        rep = fundamental_relation_check(p, sol, pols, 10_000, seed=5)
        assert rep.ok
        gaps = {r.name: r.gap for r in rep.rows}
        for i in range(3):
            assert gaps[f"c{i}"] == pytest.approx(p.T * (c[i] - c.min()), abs=1e-9)
        assert abs(gaps["feedback"]) < 1e-9
        assert rep.to_csv().splitlines()[0] == "policy,J,SE,gap,ok"

    def test_too_few_paths(self):
        p, _, _ = state_independent(M=5)
        with pytest.raises(RegressionError):
            bsde_solve(p, 5, seed=0)

    def test_singleton_action(self):
        p = problem(costs=(0.3,), rho=((1.5,),), sigma=0.2, g=lambda u: u[:, 0], M=10)
        sol = bsde_solve(p, 2_000, seed=0, features=FeatureMap("lift", 1))
        ens = simulate_ensemble(p, feedback_policy(sol), 100, seed=1)
        assert np.all(ens.actions == 0)

    def test_u_feature_warning(self, caplog):
        p = problem(costs=(0.3,), rho=((1.5,),), sigma=0.2, M=5)
        with caplog.at_level(logging.WARNING):
            bsde_solve(p, 200, seed=0)
        assert "full lift state" in caplog.text


class TestClosedLoop:
    def test_constant_feedback_bit_identical(self):
        p = problem(rho=((2.0,), (0.5,)), sigma=0.3, y0=0.1)
        fb = Policy.feedback(lambda k, t, Y, u: np.ones(u.shape[0], int))
        a = closed_loop_simulate(p, fb, seed=2)
        b = controlled_simulate(p, Policy.constant(1), seed=2)
        np.testing.assert_array_equal(a.trajectory.states, b.trajectory.states)
        np.testing.assert_array_equal(a.path.times, b.path.times)
        np.testing.assert_array_equal(a.actions, b.actions)

    def test_no_jump_coefficient_deterministic_actions(self):
        p = problem(costs=(0.0, 0.1), rho=((2.0,), (0.5,)), sigma=0.0, f=-1.0, y0=1.0)
        fb = Policy.feedback(lambda k, t, Y, u: (u[:, 0] < 2.0).astype(int))
        runs = [closed_loop_simulate(p, fb, seed=s).actions for s in range(4)]
        for r in runs[1:]:
            np.testing.assert_array_equal(r, runs[0])

    def test_rejects_schedule(self):
        with pytest.raises(ValueError):
            closed_loop_simulate(problem(), Policy.schedule(np.zeros(20, int)), seed=0)
