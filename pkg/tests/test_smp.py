"""Tests for the adjoint chain, adjoint pair, Hamiltonian, and duality."""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fracctrl import ContractError
from fracctrl.backward import DriverSpec
from fracctrl.forward import CoefficientSet, ControlProcess, simulate_state, simulate_variation
from fracctrl.fracnoise import build_innovation_system, sample_ensemble
from fracctrl.smp import (
    bracket_values,
    check_necessary_condition,
    duality_gap,
    hamiltonian,
    hamiltonian_u,
    necessary_bracket,
    solve_adjoint_k,
    solve_adjoint_pq,
    solve_variational,
    verify_convexity,
)

# Investment-cost adjoint with consumption at {2}, N = 2 (frozen recursion):
ADJOINT_P1 = -0.07468060255179591
ADJOINT_P0 = -0.028847131249756335
# Deterministic duality model (b_x=.1, b_u=.3, f_x=.3, f_y=.4, f_u=.7,
# lam=.5, gamma=1.5, N=5, u*=.8, v_n=.5+.1n): frozen by direct recursion.
DUAL_P = [0.3735943313358468, 0.28722992789672913, 0.2696225496994974,
          0.26622592379959903, 0.23498025219292584, 0.0]
DUAL_YHAT0 = 0.6519853572420244
# Gap left by wrongly dropping the n = N bracket term on the same model.
DUAL_RANGE_GAP = 0.010042231372015209


def linear_coeffs(b_x=0.1, b_u=0.3, s_x=0.0, s_u=0.0, s0=0.05):
    return CoefficientSet(
        b=lambda n, x, u: b_x * x + b_u * u,
        sigma=lambda n, x, u: s0 + s_x * x + s_u * u,
        b_x=lambda n, x, u: b_x + 0.0 * x,
        b_u=lambda n, x, u: b_u + 0.0 * x,
        sigma_x=lambda n, x, u: s_x + 0.0 * x,
        sigma_u=lambda n, x, u: s_u + 0.0 * x,
    )


def linear_cost(f_x=0.3, f_y=0.4, f_z=0.0, f_u=0.7):
    return DriverSpec(
        f=lambda n, x, y, z, u: f_x * x + f_y * y + f_z * z + f_u * u,
        f_x=lambda n, x, y, z, u: f_x + 0.0 * y,
        f_y=lambda n, x, y, z, u: f_y + 0.0 * y,
        f_z=lambda n, x, y, z, u: f_z + 0.0 * y,
        f_u=lambda n, x, y, z, u: f_u + 0.0 * y,
    )


class TestAdjointChain:
    def test_no_cost_feedback_freezes_at_minus_one(self):
        assert_allclose(solve_adjoint_k(0.0, 0.0, 3), [0.0, -1.0, -1.0, -1.0], rtol=0, atol=0)

    @pytest.mark.parametrize("n", [2, 3, 6])
    def test_constant_growth_chain(self, n):
        k = solve_adjoint_k(0.5, 0.0, n)
        want = np.concatenate([[0.0], -1.5 ** np.arange(n, dtype=float)])
        assert_allclose(k, want, rtol=1e-15, atol=0, err_msg=f"k mismatch: {k} vs {want}")

    def test_half_growth_reaches_frozen_value(self):
        assert solve_adjoint_k(0.5, 0.0, 3)[3] == pytest.approx(-2.25, abs=0)

    def test_per_step_growth_table(self):
        k = solve_adjoint_k(np.array([0.0, 0.5, 0.0, 0.5]), 0.0, 4)
        assert_allclose(k, [0.0, -1.0, -1.5, -1.5, -2.25], rtol=0, atol=0)

    def test_noise_driven_chain_is_mean_constant(self):
        rng = np.random.default_rng(17)
        eta = rng.standard_normal((100_000, 6))
        k = solve_adjoint_k(0.0, 1.0, 6, eta=eta)
        assert k.shape == (100_000, 7)
        means = k.mean(axis=0)
        # Var(k_n) = 2^{n-1} - 1; allow four standard errors at each step.
        for n in range(1, 7):
            band = 4.0 * np.sqrt((2.0 ** (n - 1) - 1.0) / 100_000 + 1e-30)
            assert abs(means[n] + 1.0) < band + 1e-12, (
                f"E[k_{n}] = {means[n]:.4f} leaves the band around -1"
            )

    def test_zero_noise_matches_deterministic_chain(self):
        eta = np.zeros((4, 5))
        k = solve_adjoint_k(0.25, 0.7, 5, eta=eta)
        want = solve_adjoint_k(0.25, 0.0, 5)
        assert_allclose(k, np.broadcast_to(want, k.shape), rtol=0, atol=0)

    def test_contract_errors(self):
        with pytest.raises(ContractError, match="noise-driven"):
            solve_adjoint_k(0.0, 1.0, 4)
        with pytest.raises(ContractError, match="shape"):
            solve_adjoint_k(0.0, 1.0, 4, eta=np.zeros((3, 2)))
        with pytest.raises(ValueError, match="n_steps"):
            solve_adjoint_k(0.0, 0.0, -1)


class TestAdjointPair:
    def test_investment_consumption_frozen_values(self):
        chi = np.array([0.0, 0.0, 1.0])
        b_x = (1 + 0.05) * (1 - 0.5 * chi) - 1
        f_x = -1.0 * chi
        k = solve_adjoint_k(0.5, 0.0, 2)
        sol = solve_adjoint_pq(b_x, 0.0, f_x, k, 2, 1.0, 2.0)
        assert_allclose(
            sol.y[0], [ADJOINT_P0, ADJOINT_P1, 0.0], rtol=0, atol=1e-15,
            err_msg=f"adjoint pair {sol.y[0]} off the frozen recursion",
        )
        assert_allclose(sol.z, 0.0, rtol=0, atol=0)

    def test_zero_cost_gradient_gives_zero_adjoint(self):
        k = solve_adjoint_k(0.3, 0.0, 4)
        sol = solve_adjoint_pq(0.2, 0.0, 0.0, k, 4, 0.5, 1.5)
        assert_allclose(sol.y, 0.0, rtol=0, atol=0)

    def test_state_noise_partial_needs_the_system(self):
        k = solve_adjoint_k(0.0, 0.0, 3)
        with pytest.raises(ContractError, match="innovation system"):
            solve_adjoint_pq(0.1, 0.2, 0.3, k, 3, 1.0, 2.0)

    def test_white_noise_kills_the_prediction_term(self):
        sys = build_innovation_system(0.5, 5)
        noise = sample_ensemble(sys, 3, 8)
        control = ControlProcess(values=np.zeros(5))
        state = simulate_state(linear_coeffs(), control, noise, 1.0)
        k = solve_adjoint_k(0.4, 0.0, 4)
        with_g = solve_adjoint_pq(0.1, 0.3, 0.2, k, 4, 0.5, 1.5, state=state, sys=sys)
        plain = solve_adjoint_pq(0.1, 0.0, 0.2, k, 4, 0.5, 1.5)
        assert_allclose(
            with_g.y, np.broadcast_to(plain.y, with_g.y.shape), rtol=0, atol=1e-15,
            err_msg="at H = 0.5 the prediction term must contribute nothing",
        )


class TestHamiltonian:
    coeffs = CoefficientSet(
        b=lambda n, x, u: 2.0 * x + 3.0 * u,
        sigma=lambda n, x, u: 1.0 + 0.0 * x,
        b_x=lambda n, x, u: 2.0 + 0.0 * x,
        b_u=lambda n, x, u: 3.0 + 0.0 * x,
        sigma_x=lambda n, x, u: 0.0 * x,
        sigma_u=lambda n, x, u: 0.0 * x,
    )
    cost = DriverSpec(
        f=lambda n, x, y, z, u: x + y + z + u,
        f_u=lambda n, x, y, z, u: 1.0 + 0.0 * y,
    )
    args = dict(n=0, x=1.0, y=0.5, z=0.5, u=2.0, p=1.5, q=-0.5, k=2.0, pred=0.3, beta_nn=0.9)

    def test_hand_computed_value(self):
        got = hamiltonian(self.coeffs, self.cost, **self.args)
        assert got == pytest.approx(20.0, abs=1e-14), f"H = {got}, expected 20.0"

    def test_control_derivative(self):
        got = hamiltonian_u(self.coeffs, self.cost, **self.args)
        assert got == pytest.approx(6.5, abs=1e-14)

    def test_bracket_flips_the_cost_term(self):
        bracket = necessary_bracket(self.coeffs, self.cost, **self.args)
        ham_u = hamiltonian_u(self.coeffs, self.cost, **self.args)
        assert bracket == pytest.approx(2.5, abs=1e-14)
        assert ham_u - bracket == pytest.approx(
            2.0 * 1.0 * self.args["k"], abs=1e-14
        ), "H_u and the bracket must differ by exactly twice the cost term"

    def test_missing_cost_partial_is_a_contract_error(self):
        bare = DriverSpec(f=self.cost.f)
        with pytest.raises(ContractError, match="f_u"):
            hamiltonian_u(self.coeffs, bare, **self.args)
        with pytest.raises(ContractError, match="f_u"):
            necessary_bracket(self.coeffs, bare, **self.args)


class TestNecessaryCheck:
    def test_lower_boundary_optimum_passes(self):
        bracket = np.ones((8, 5))
        lo, hi = np.zeros((8, 5)), np.ones((8, 5))
        report = check_necessary_condition(bracket, lo, lo, hi, n_trials=20, seed=1)
        assert report["passed"] is True
        assert report["n_violations"] == 0
        assert report["min_bracket_product"] >= 0.0

    def test_upper_boundary_with_positive_bracket_fails(self):
        bracket = np.ones((4, 3))
        lo, hi = np.zeros((4, 3)), np.ones((4, 3))
        report = check_necessary_condition(bracket, hi, lo, hi, n_trials=5, seed=2)
        assert report["passed"] is False and report["n_violations"] > 0
        assert report["min_bracket_product"] < 0
        first = report["violations"][0]
        assert {"trial", "path", "step", "value"} <= set(first)
        json.dumps(report)

    def test_interior_optimum_with_zero_bracket_passes(self):
        report = check_necessary_condition(
            np.zeros((3, 4)), 0.5 * np.ones((3, 4)), 0.0, 1.0, n_trials=10, seed=3
        )
        assert report["passed"] is True

    def test_one_dimensional_inputs_report_plain_indices(self):
        report = check_necessary_condition(
            np.ones(6), np.ones(6), np.zeros(6), np.ones(6), n_trials=3, seed=4
        )
        assert report["n_violations"] > 0
        assert "index" in report["violations"][0]

    def test_report_independent_of_thread_cap(self, monkeypatch):
        bracket = np.random.default_rng(5).standard_normal((16, 9))
        u_star = np.full((16, 9), 0.5)
        monkeypatch.setenv("FRACCTRL_THREADS", "1")
        serial = check_necessary_condition(bracket, u_star, 0.0, 1.0, n_trials=12, seed=6)
        monkeypatch.setenv("FRACCTRL_THREADS", "4")
        threaded = check_necessary_condition(bracket, u_star, 0.0, 1.0, n_trials=12, seed=6)
        assert serial == threaded, "trial seeding must make the report scheduling-invariant"

    def test_bad_inputs(self, monkeypatch):
        with pytest.raises(ValueError, match="upper bound below"):
            check_necessary_condition(np.ones(3), np.zeros(3), 1.0, 0.0)
        monkeypatch.setenv("FRACCTRL_THREADS", "many")
        with pytest.raises(ValueError, match="FRACCTRL_THREADS"):
            check_necessary_condition(np.ones(3), np.zeros(3), 0.0, 1.0, n_trials=2)


class TestConvexity:
    @staticmethod
    def sampler(rng, size):
        return rng.standard_normal(size), rng.standard_normal(size)

    def test_quadratic_bowl_is_convex(self):
        report = verify_convexity(lambda x, u: x**2 + u**2, self.sampler, seed=8)
        assert report["convex"] is True and report["n_violations"] == 0

    def test_affine_is_convex(self):
        report = verify_convexity(lambda x, u: 2.0 * x - 3.0 * u + 1.0, self.sampler, seed=9)
        assert report["convex"] is True

    def test_concave_bump_is_reported_honestly(self):
        report = verify_convexity(lambda x, u: -(u**2), self.sampler, seed=10)
        assert report["convex"] is False
        assert report["max_gap"] > 0
        assert report["violations"][0]["gap"] > 0
        json.dumps(report)


class TestVariationalDuality:
    lam, gamma_exp, n_trunc = 0.5, 1.5, 5

    def _deterministic_setup(self):
        sys = build_innovation_system(0.75, 8)
        noise = sample_ensemble(sys, 11, 16, n_steps=6)
        coeffs = linear_coeffs()  # sigma constant: no state or control noise load
        control = ControlProcess(values=np.full(6, 0.8))
        state = simulate_state(coeffs, control, noise, 1.0)
        v = 0.5 + 0.1 * np.arange(6.0)
        return sys, coeffs, state, v

    def test_deterministic_model_matches_frozen_recursion(self):
        sys, coeffs, state, v = self._deterministic_setup()
        k = solve_adjoint_k(0.4, 0.0, self.n_trunc)
        adjoint = solve_adjoint_pq(0.1, 0.0, 0.3, k, self.n_trunc, self.lam, self.gamma_exp)
        assert_allclose(adjoint.y[0], DUAL_P, rtol=0, atol=1e-14)

        variation = simulate_variation(coeffs, state, v)
        assert np.all(np.ptp(variation.values, axis=0) == 0.0), (
            "variation must be deterministic when sigma is constant"
        )
        variational = solve_variational(
            0.3, 0.4, 0.0, 0.7, variation, v, self.n_trunc, self.lam, self.gamma_exp,
            backend="exact",
        )
        assert_allclose(variational.y[0, 0], DUAL_YHAT0, rtol=0, atol=1e-14)

    def test_duality_identity_is_exact_including_terminal_term(self):
        sys, coeffs, state, v = self._deterministic_setup()
        k = solve_adjoint_k(0.4, 0.0, self.n_trunc)
        adjoint = solve_adjoint_pq(0.1, 0.0, 0.3, k, self.n_trunc, self.lam, self.gamma_exp)
        variation = simulate_variation(coeffs, state, v)
        variational = solve_variational(
            0.3, 0.4, 0.0, 0.7, variation, v, self.n_trunc, self.lam, self.gamma_exp,
            backend="exact",
        )
        bracket = bracket_values(coeffs, linear_cost(), state, adjoint, k, sys)
        report = duality_gap(bracket, v, variational)
        assert report["gap"] < 1e-12, f"duality gap {report['gap']:.3e} should be machine-zero"
        assert report["rhs"] == pytest.approx(DUAL_YHAT0, abs=1e-12)

        # Dropping the terminal bracket column must reopen a visible gap:
        # the summation range n = 0..N is part of the identity.
        grid = np.arange(self.n_trunc + 1, dtype=float)
        weights = np.exp(-self.lam * grid**self.gamma_exp)
        short = float(np.mean(np.sum((weights * bracket * v)[:, :-1], axis=1)))
        assert abs(short - report["rhs"]) == pytest.approx(DUAL_RANGE_GAP, rel=1e-6)

    def test_regression_backend_reproduces_the_deterministic_answer(self):
        sys, coeffs, state, v = self._deterministic_setup()
        variation = simulate_variation(coeffs, state, v)
        variational = solve_variational(
            0.3, 0.4, 0.0, 0.7, variation, v, self.n_trunc, self.lam, self.gamma_exp,
            backend="regression", window=2,
        )
        assert_allclose(
            variational.y[:, 0], DUAL_YHAT0, rtol=0, atol=1e-9,
            err_msg="regression must reproduce deterministic targets exactly",
        )

    def test_duality_holds_in_expectation_with_all_terms_live(self):
        sys = build_innovation_system(0.75, 8)
        noise = sample_ensemble(sys, 29, 20_000, n_steps=6)
        coeffs = linear_coeffs(b_x=0.1, b_u=0.3, s_x=0.15, s_u=0.2, s0=0.05)
        cost = linear_cost(f_x=0.3, f_y=0.2, f_z=0.25, f_u=0.7)
        control = ControlProcess(values=np.full(6, 0.8))
        state = simulate_state(coeffs, control, noise, 1.0)
        v = 0.5 + 0.1 * np.arange(6.0)

        k = solve_adjoint_k(0.2, 0.25, self.n_trunc, eta=noise.eta)
        adjoint = solve_adjoint_pq(
            0.1, 0.15, 0.3, k, self.n_trunc, self.lam, self.gamma_exp,
            state=state, sys=sys, backend="regression", window=5,
        )
        variation = simulate_variation(coeffs, state, v)
        variational = solve_variational(
            0.3, 0.2, 0.25, 0.7, variation, v, self.n_trunc, self.lam, self.gamma_exp,
            backend="regression", window=5,
        )
        bracket = bracket_values(coeffs, cost, state, adjoint, k, sys)
        report = duality_gap(bracket, v, variational)
        # Least squares with an intercept preserves sample means step by step,
        # so the identity is nearly exact in-sample (observed gap ~4e-7 here),
        # not merely within Monte Carlo error.
        assert report["rhs"] > 0.1, f"vacuous configuration: {report}"
        assert report["gap"] < 1e-5, f"duality gap too wide: {report}"
