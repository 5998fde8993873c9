import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbsde_lab.bsde import RegressionBasis, cost_functional
from fbsde_lab.core import ControlLaw, ProblemSpec, build_grid, constant_control, linear_feedback, sample_brownian
from fbsde_lab.dpp import (ValueField, delta_function, dpp_residual, exhaustive_value, hjb_delta,
                           lq_value_field, mp_dpp_relation_general, piecewise_constant_law)
from fbsde_lab.errors import ConfigurationError
from fbsde_lab.hamilton import AdjointTriple
from fbsde_lab.lq import (LqCoefficients, feedback_control, mp_dpp_residual_lq, solve_k_lq,
                          solve_lq_adjoint, solve_riccati_ode)
from fbsde_lab.sde import simulate_forward

FIXED = dict(B=1, Q=1, R=1, G=1)


@pytest.fixture(scope="module")
def fixed_point():
    c = LqCoefficients.from_values(**FIXED)
    grid = build_grid(0, 1, 40)
    ric = solve_riccati_ode(c, grid)
    return c, grid, ric, lq_value_field(ric)


class TestHjbDelta:
    @given(st.floats(-3, 3), st.floats(-3, 3))
    def test_closed_form(self, x, u):
        # V = x^2 on the fixed point: G = 2xu + x^2 + u^2, Gamma = 0, Delta = -(u + x)^2
        c = LqCoefficients.from_values(**FIXED)
        grid = build_grid(0, 1, 4)
        field = lq_value_field(solve_riccati_ode(c, grid))
        spec = c.to_problem_spec(1.0)
        ctrl = np.concatenate([np.linspace(-4, 4, 81), [-x]])
        d = delta_function(field, spec, 1, [[x]], 0.0, u, ctrl)
        assert d[0] == pytest.approx(-(u + x) ** 2, abs=1e-9)

    def test_nonpositive_and_zero_at_argmin(self, fixed_point):
        c, grid, _, field = fixed_point
        x = np.linspace(-2, 2, 9)[:, None]
        rep = hjb_delta(field, c.to_problem_spec(grid.T), 5, x, np.zeros(9), np.linspace(-3, 3, 61))
        assert np.all(rep.delta <= 0)
        rows = np.arange(9)
        assert np.all(rep.delta[rows, np.argmax(rep.delta, axis=1)] == 0)
        np.testing.assert_allclose(rep.argmin[:, 0], -x[:, 0], atol=1e-12)

    def test_empty_grid(self, fixed_point):
        c, grid, _, field = fixed_point
        with pytest.raises(ConfigurationError):
            hjb_delta(field, c.to_problem_spec(grid.T), 0, [[1.0]], 0.0, [])


class TestDppResidual:
    def test_zero_horizon(self, fixed_point):
        c, grid, _, field = fixed_point
        d = sample_brownian(grid, 100, 1)
        r = dpp_residual(field, c.to_problem_spec(grid.T), linear_feedback(2.0), 10, 0, 1.0, d,
                         RegressionBasis(2))
        assert r.residual == 0.0 and r.value == 1.0

    def test_optimal_law(self, fixed_point):
        c, grid, ric, field = fixed_point
        d = sample_brownian(grid, 1000, 2)
        r = dpp_residual(field, c.to_problem_spec(grid.T), feedback_control(ric, c), 0, 10, 1.0, d,
                         RegressionBasis(2))
        assert abs(r.residual) <= 0.02 * r.value + 3 * r.se

    @pytest.mark.parametrize("gain,shift", [(0.0, 0.0), (-2.0, 0.3), (-0.5, -0.5)])
    def test_suboptimal_laws_nonnegative(self, gain, shift):
        c = LqCoefficients.from_values(A=0.1, B=1, C=0.3, D=0.2, lam=0.1, Q=1, R=1, G=1)
        grid = build_grid(0, 1, 40)
        field = lq_value_field(solve_riccati_ode(c, grid))
        d = sample_brownian(grid, 2000, 3)
        law = ControlLaw("feedback", 1, feedback=lambda s, t, x, w: gain * x + shift)
        r = dpp_residual(field, c.to_problem_spec(grid.T), law, 0, 20, 1.0, d, RegressionBasis(2))
        assert r.residual >= -3 * r.se


def zero_cost_spec():
    return ProblemSpec(b=lambda t, x, u, w: u + 0 * x, sigma=lambda t, x, u, w: 0 * x + 0.5,
                       f=lambda t, x, y, z, u, w: np.zeros(x.shape[0]), h=lambda x, w: np.zeros(x.shape[0]))


class TestExhaustive:
    def test_zero_problem(self):
        grid = build_grid(0, 1, 8)
        d = sample_brownian(grid, 50, 1)
        res = exhaustive_value(zero_cost_spec(), 0, 1.0, [-1, 0, 1], 2, grid, d, RegressionBasis(1))
        assert res.value == 0.0 and res.controls == ((-1.0,), (-1.0,))
        assert np.all(res.values == 0)

    def test_one_macro_step(self, fixed_point):
        c, grid, _, _ = fixed_point
        spec = c.to_problem_spec(grid.T)
        d = sample_brownian(grid, 200, 4)
        b = RegressionBasis(2)
        res = exhaustive_value(spec, 0, 1.0, [-1.0, 0.0], 1, grid, d, b)
        direct = [cost_functional(spec, constant_control(v), 1.0, grid, d, b)[0] for v in (-1.0, 0.0)]
        np.testing.assert_allclose(res.values, direct, rtol=1e-12)
        assert res.value == min(direct)

    def test_cap(self, fixed_point):
        c, grid, _, _ = fixed_point
        d = sample_brownian(grid, 10, 4)
        with pytest.raises(ConfigurationError, match="cap"):
            exhaustive_value(c.to_problem_spec(grid.T), 0, 1.0, np.linspace(-1, 1, 11), 5, grid, d,
                             RegressionBasis(1), cap=1000)

    def test_bad_macro_steps(self, fixed_point):
        c, grid, _, _ = fixed_point
        d = sample_brownian(grid, 10, 4)
        for m in (0, grid.N + 1):
            with pytest.raises(ConfigurationError):
                exhaustive_value(c.to_problem_spec(grid.T), 0, 1.0, [0.0], m, grid, d, RegressionBasis(1))

    def test_upper_bound_and_refinement(self):
        c = LqCoefficients.from_values(**FIXED)
        grid = build_grid(0, 1, 12)
        spec = c.to_problem_spec(grid.T)
        d = sample_brownian(grid, 200, 5)
        ctrl = np.linspace(-1.2, 0.0, 7)
        coarse = exhaustive_value(spec, 0, 1.0, ctrl, 1, grid, d, RegressionBasis(1))
        fine = exhaustive_value(spec, 0, 1.0, ctrl, 3, grid, d, RegressionBasis(1))
        # the value of the fixed-point problem is x0^2 = 1
        assert fine.value <= coarse.value + 1e-12
        assert fine.value >= 1.0 - 3 * fine.se - 1e-9

    def test_piecewise_blocks(self):
        grid = build_grid(0, 1, 6)
        law = piecewise_constant_law([(1.0,), (2.0,), (3.0,)], 0, grid, 2, 1)
        assert law.open_loop[0, :, 0].tolist() == [1, 1, 2, 2, 3, 3]


class TestMpDppRelation:
    def test_lq_field_matches_lq_residual(self):
        c = LqCoefficients.from_values(A=0.1, B=1, C=0.3, D=0.2, lam=0.1, Q=1, R=1, G=1)
        grid = build_grid(0, 1, 40)
        ric = solve_riccati_ode(c, grid)
        d = sample_brownian(grid, 1000, 6)
        states = simulate_forward(c.to_problem_spec(grid.T), feedback_control(ric, c), 1.0, grid, d)
        adj = solve_lq_adjoint(c, states, solve_k_lq(c, grid, d), d, RegressionBasis(2))
        gp, gq = mp_dpp_relation_general(lq_value_field(ric), c.to_problem_spec(grid.T), states, adj, d)
        lp, lq_ = mp_dpp_residual_lq(ric, c, states, adj, d)
        assert gp.abs_rms == pytest.approx(lp.abs_rms, rel=1e-10)
        assert gq.abs_rms == pytest.approx(lq_.abs_rms, rel=1e-10)

    def test_zero_multiplier(self, fixed_point):
        c, grid, ric, field = fixed_point
        d = sample_brownian(grid, 20, 7)
        states = simulate_forward(c.to_problem_spec(grid.T), feedback_control(ric, c), 1.0, grid, d)
        adj = AdjointTriple(np.zeros((20, grid.N + 1, 1)), np.zeros((20, grid.N, 1)), np.zeros((20, grid.N + 1)))
        p, q = mp_dpp_relation_general(field, c.to_problem_spec(grid.T), states, adj, d)
        assert p.abs_rms == 0 and q.abs_rms == 0


class TestValueField:
    def test_terminal_condition(self, fixed_point):
        c, grid, _, field = fixed_point
        x = np.linspace(-2, 2, 5)[:, None]
        spec = c.to_problem_spec(grid.T)
        assert field.check_terminal(spec, x, np.zeros(5)) <= 1e-12
        bad = ValueField(grid, V=lambda s, x, w: x[:, 0] ** 2 + 1, Psi=lambda s, x, w: 0 * x[:, 0])
        with pytest.raises(ConfigurationError):
            bad.check_terminal(spec, x, np.zeros(5))

    def test_finite_difference_derivatives(self, fixed_point):
        _, grid, _, field = fixed_point
        fd = ValueField(grid, V=field.V, Psi=field.Psi)
        x = np.array([[0.7], [-1.3]])
        w = np.zeros(2)
        np.testing.assert_allclose(fd.grad(3, x, w), field.grad(3, x, w), rtol=1e-6)
        np.testing.assert_allclose(fd.hess(3, x, w), field.hess(3, x, w), rtol=1e-5)
