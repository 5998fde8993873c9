import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsde_lab.bsde import RegressionBasis
from fbsde_lab.core import build_grid, sample_brownian, shifted
from fbsde_lab.errors import ConfigurationError, NearSingularGainError, PositivityLossError
from fbsde_lab.lq import (LqCoefficients, feedback_control, feedback_gain, hjb_minimizer, lq_value,
                          lyapunov_closed_form, mp_dpp_residual_lq, riccati_generator, solve_k_lq,
                          solve_lq_adjoint, solve_riccati, solve_riccati_lsmc, solve_riccati_ode,
                          stationarity_residual)
from fbsde_lab.sde import simulate_forward

FIXED = dict(B=1, Q=1, R=1, G=1)


def lq(**kw):
    return LqCoefficients.from_values(**kw)


def run(coeffs, grid, driver, basis=RegressionBasis(2), x0=1.0, law=None):
    ric = solve_riccati(coeffs, grid, driver)
    law = law or feedback_control(ric, coeffs)
    spec = coeffs.to_problem_spec(grid.T)
    states = simulate_forward(spec, law, x0, grid, driver)
    k = solve_k_lq(coeffs, grid, driver)
    return ric, states, solve_lq_adjoint(coeffs, states, k, driver, basis)


class TestCoefficients:
    def test_defaults_and_shapes(self):
        c = lq(n=2, k=1, A=[[0, 1], [0, 0]], B=[[0], [1]])
        assert c.R.shape == (1, 1)
        assert c.at(0.0, np.zeros(3))["A"].shape == (3, 2, 2)
        assert not c.random

    def test_unknown_field(self):
        with pytest.raises(ConfigurationError):
            lq(E=1)

    def test_wrong_shape(self):
        with pytest.raises(ConfigurationError):
            lq(n=2, A=[1, 2, 3])

    def test_positivity_margin(self):
        with pytest.raises(ConfigurationError):
            lq(Q=0.0, margin=1e-6).check_positivity([0.0], np.zeros(2))
        lq(Q="1 + 0.5*sin(w)", margin=0.1).check_positivity([0.0, 1.0], np.linspace(-5, 5, 11))

    def test_problem_spec_partials_match_fd(self, rng):
        c = lq(A=0.3, B=0.7, C=0.2, D=-0.4, lam="0.5*cos(w)", Q=2, R=1.5, G="1 + 0.1*sin(w)")
        spec = c.to_problem_spec(1.0)
        x, u, w = rng.normal(size=(5, 1)), rng.normal(size=(5, 1)), rng.normal(size=5)
        y, z = rng.normal(size=5), rng.normal(size=5)
        fd = type(spec)(spec.b, spec.sigma, spec.f, spec.h)
        for name, args in [("b_x", (0.1, x, u, w)), ("sigma_u", (0.1, x, u, w)),
                           ("f_x", (0.1, x, y, z, u, w)), ("f_y", (0.1, x, y, z, u, w)),
                           ("f_u", (0.1, x, y, z, u, w)), ("h_x", (x, w))]:
            np.testing.assert_allclose(spec.partial(name, *args), fd.partial(name, *args), rtol=1e-6, atol=1e-8)


class TestRiccatiOde:
    def test_fixed_point(self):
        ric = solve_riccati_ode(lq(**FIXED), build_grid(0, 3.0, 300))
        assert np.max(np.abs(ric.P - 1)) <= 1e-10
        assert np.all(ric.L == 0)

    def test_zero_solution(self):
        ric = solve_riccati_ode(lq(B=1, Q=0, G=0), build_grid(0, 1, 20))
        assert np.all(ric.P == 0)

    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 2), st.floats(0, 2))
    def test_lyapunov_closed_form(self, A, lam, Q, G):
        g = build_grid(0, 1, 100)
        ric = solve_riccati_ode(lq(A=A, lam=lam, Q=Q, G=G), g)
        np.testing.assert_allclose(ric.P[:, 0, 0], lyapunov_closed_form(A, lam, Q, G, 1.0, g.nodes),
                                   rtol=1e-8, atol=1e-10)

    def test_terminal_exact_and_symmetric(self):
        c = lq(n=2, k=1, A=[[0, 1], [-1, 0.2]], B=[[0], [1]], C=[[0.1, 0], [0.2, 0.3]],
               D=[[0.1], [0.2]], Q=[[1, 0.2], [0.2, 1]], G=[[2, 0.5], [0.5, 1]])
        ric = solve_riccati_ode(c, build_grid(0, 1, 100))
        np.testing.assert_array_equal(ric.P[-1], [[2, 0.5], [0.5, 1]])
        np.testing.assert_array_equal(ric.P, np.swapaxes(ric.P, 1, 2))
        assert np.min(np.linalg.eigvalsh(ric.P)) > 0

    def test_rejects_random_coefficients(self):
        with pytest.raises(ConfigurationError):
            solve_riccati_ode(lq(lam="sin(w)", **FIXED), build_grid(0, 1, 10))

    def test_positivity_loss(self):
        with pytest.raises(PositivityLossError):
            solve_riccati_ode(lq(B=1, Q=0, G=-1), build_grid(0, 0.5, 10))

    def test_near_singular_gain(self):
        with pytest.raises(NearSingularGainError):
            solve_riccati_ode(lq(k=2, B=[[1, 1]], Q=1, R=[[1, 0], [0, 1e-14]], G=1), build_grid(0, 1, 10))


class TestRiccatiLsmc:
    def test_matches_ode_on_deterministic_data(self):
        c = lq(A=0.1, B=1, C=0.3, D=0.2, lam=0.1, Q=1, R=1, G=1)
        g = build_grid(0, 1, 50)
        ode = solve_riccati_ode(c, g)
        mc = solve_riccati_lsmc(c, g, sample_brownian(g, 4000, 2))
        assert abs(mc.P0()[0, 0] - ode.P0()[0, 0]) / ode.P0()[0, 0] < 0.05
        assert np.max(np.abs(mc.L)) < 1e-6

    def test_zero_solution(self):
        g = build_grid(0, 1, 20)
        mc = solve_riccati_lsmc(lq(B=1, Q=0, G=0), g, sample_brownian(g, 500, 2))
        assert np.max(np.abs(mc.P)) < 1e-12 and np.max(np.abs(mc.L)) < 1e-12

    def test_random_lambda_within_envelope(self):
        g = build_grid(0, 1, 50)
        # a quadratic in w cannot follow sin(w) on tail paths; degree 5 can
        mc = solve_riccati_lsmc(lq(lam="sin(w)", **FIXED), g, sample_brownian(g, 4000, 3),
                                RegressionBasis(5, ("w",)))
        lo = solve_riccati_ode(lq(lam=-1, **FIXED), g).P[:, 0, 0]
        hi = solve_riccati_ode(lq(lam=1, **FIXED), g).P[:, 0, 0]
        eig = mc.P[..., 0, 0]
        assert np.all(eig >= 0)
        assert np.all(eig <= hi[None, :] + 2e-3)
        assert np.all(eig >= lo[None, :] - 2e-3)
        assert mc.max_clip == 0.0

    def test_clip_escalation(self):
        g = build_grid(0, 1, 10)
        c = lq(B=1, Q=0, G="0.5*w")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            mc = solve_riccati_lsmc(c, g, sample_brownian(g, 200, 1))
        assert mc.max_clip > 1e-4
        with pytest.raises(PositivityLossError):
            solve_riccati_lsmc(c, g, sample_brownian(g, 200, 1), strict=True)

    def test_basis_restricted_to_factor(self):
        g = build_grid(0, 1, 10)
        with pytest.raises(ConfigurationError):
            solve_riccati_lsmc(lq(**FIXED), g, sample_brownian(g, 100, 1), RegressionBasis(2, ("x", "w")))


class TestFeedback:
    def test_fixed_point_gain(self):
        g = build_grid(0, 1, 10)
        law = feedback_control(solve_riccati_ode(lq(**FIXED), g), lq(**FIXED))
        x = np.array([[1.0], [-2.0]])
        np.testing.assert_allclose(law(3, g.time(3), x, np.zeros(2)), -x, rtol=1e-12)

    def test_zero_gain(self):
        g = build_grid(0, 1, 10)
        c = lq(Q=1, G=1)
        law = feedback_control(solve_riccati_ode(c, g), c)
        assert np.all(law(0, 0.0, np.ones((3, 1)), np.zeros(3)) == 0)

    def test_numeric_gain(self):
        c = lq(B=1, C=1, D=1, R=1).at(0.0, np.zeros(1))
        gain = feedback_gain(np.full((1, 1, 1), 2.0), np.zeros((1, 1, 1)), c)
        assert gain[0, 0, 0] == pytest.approx(-4 / 3, rel=1e-14)

    def test_lq_value(self):
        ric = solve_riccati_ode(lq(**FIXED), build_grid(0, 1, 10))
        v, psi = lq_value(ric, 0, 3.0, np.zeros(1))
        assert v[0] == pytest.approx(9.0) and psi[0] == 0
        v, psi = lq_value(ric, 5, 0.0, np.zeros(4))
        assert np.all(v == 0) and np.all(psi == 0)

    @given(st.floats(0.1, 3), st.floats(-1, 1), st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1),
           st.floats(-1, 1), st.floats(0.1, 3), st.floats(-3, 3))
    def test_hjb_minimizer_equals_feedback(self, P, L, B, C, D, A, R, x):
        c = lq(A=A, B=B, C=C, D=D, R=R, Q=1).at(0.0, np.zeros(1))
        Pm, Lm, xv = np.full((1, 1, 1), P), np.full((1, 1, 1), L), np.array([[x]])
        u, val = hjb_minimizer(Pm, Lm, c, xv)
        u_fb = feedback_gain(Pm, Lm, c) @ xv[0]
        assert abs(u[0, 0] - u_fb[0, 0]) <= 1e-12 * (1 + abs(u_fb[0, 0]))
        assert val[0] == pytest.approx(riccati_generator(Pm, Lm, c)[0, 0, 0] * x * x, rel=1e-12, abs=1e-12)


class TestMultiplier:
    def test_zero_rate(self, grid, driver):
        assert np.all(solve_k_lq(lq(**FIXED), grid, driver) == -1)

    def test_constant_rate(self, grid, driver):
        k = solve_k_lq(lq(lam=0.7, **FIXED), grid, driver)
        np.testing.assert_allclose(k[0], -np.exp(0.7 * grid.nodes), rtol=1e-12)

    def test_random_rate_refinement(self):
        fine = build_grid(0, 1, 400)
        d = sample_brownian(fine, 50, 4)
        c = lq(lam="sin(w)", **FIXED)
        k_fine = solve_k_lq(c, fine, d)[:, -1]
        errs = []
        for factor in (8, 4):
            coarse = build_grid(0, 1, 400 // factor)
            W = d.W[:, ::factor]
            lam = np.sin(W[:, :-1])
            errs.append(np.abs(-np.exp(lam.sum(axis=1) * coarse.dt) - k_fine).mean())
        # O(dt): halving dt roughly halves the gap to the fine quadrature
        assert errs[1] < errs[0] and errs[0] < 0.2


class TestAdjoint:
    def test_zero_cost_zero_adjoint(self, grid, driver):
        _, _, adj = run(lq(B=1, Q=0, G=0, R=1), grid, driver)
        assert np.all(adj.p == 0) and np.all(adj.q == 0)
        assert np.all(adj.k[:, 0] == -1)

    def test_fixed_point_initial_adjoint(self, grid, driver):
        _, states, adj = run(lq(**FIXED), grid, driver, x0=1.5)
        assert adj.p[:, 0, 0].mean() == pytest.approx(3.0, rel=0.02)
        assert np.max(np.abs(adj.q)) < 1e-8

    def test_stationarity_trivial(self, grid, driver):
        c = lq(Q=0, G=0)
        _, states, adj = run(c, grid, driver)
        rep = stationarity_residual(c, states, adj, driver)
        assert np.all(rep.residual == 0) and rep.rel_rms == 0

    def test_stationarity_discriminates(self, grid, driver):
        c = lq(A=0.1, B=1, C=0.3, D=0.2, lam=0.1, Q=1, R=1, G=1)
        ric, states, adj = run(c, grid, driver)
        assert stationarity_residual(c, states, adj, driver).rel_rms < 0.05
        law = shifted(feedback_control(ric, c), 0.5)
        _, st2, adj2 = run(c, grid, driver, law=law)
        assert stationarity_residual(c, st2, adj2, driver).rel_rms > 0.2

    def test_relations_zero_problem(self, grid, driver):
        c = lq(Q=0, G=0)
        ric, states, adj = run(c, grid, driver)
        rp, rq = mp_dpp_residual_lq(ric, c, states, adj, driver)
        assert rp.abs_rms == rq.abs_rms == rp.rel_rms == rq.rel_rms == 0

    def test_relations_fixed_point(self, grid, driver):
        c = lq(**FIXED)
        ric, states, adj = run(c, grid, driver)
        rp, rq = mp_dpp_residual_lq(ric, c, states, adj, driver)
        assert rp.rel_rms < 0.05 and rq.abs_rms < 1e-8
