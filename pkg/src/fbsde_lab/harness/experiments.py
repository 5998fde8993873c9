"""Experiment registry.

Each experiment maps a resolved :class:`ExperimentConfig` to a list of
criterion rows.  Registry entries carry their default problem, parameters,
tolerances and any grid/mc defaults that differ from the global ones.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..bsde import RegressionBasis, cost_functional, solve_bsde
from ..core import (ControlLaw, build_grid, compile_factor, linear_feedback, sample_brownian,
                    shifted)
from ..dpp import dpp_residual, hjb_delta, lq_value_field, mp_dpp_relation_general
from ..errors import ConfigurationError, ExperimentError, SchemaError
from ..hamilton import (duality_integral, first_order_condition_check, gateaux_derivative,
                        relative, rms, solve_adjoint_general, solve_k_general, solve_variational)
from ..lq import (feedback_control, feedback_gain, gain_terms, hjb_minimizer, lq_value, mp_dpp_residual_lq,
                  solve_k_lq, solve_lq_adjoint, solve_riccati, solve_riccati_lsmc,
                  solve_riccati_ode, stationarity_residual)
from ..sde import simulate_forward
from .config import ExperimentConfig
from .problems import Problem, build_problem
from .report import Row, RunReport, write_report

FIXED_POINT = {"kind": "lq", "coefficients": {"B": 1, "Q": 1, "R": 1, "G": 1}, "x0": 1.0}
NONDEGENERATE = {"kind": "lq", "x0": 1.0,
                 "coefficients": {"A": 0.1, "B": 1, "C": 0.3, "D": 0.2, "lam": 0.1, "Q": 1, "R": 1, "G": 1}}
RANDOM_LAMBDA = {"kind": "lq", "x0": 1.0,
                 "coefficients": {"B": 1, "Q": 1, "R": 1, "G": 1, "lam": "0.5*sin(w)"}}
GBM = {"kind": "gbm", "mu": 0.1, "sigma": 0.2, "x0": 1.0}


@dataclass(frozen=True)
class Experiment:
    name: str
    fn: Callable
    description: str
    problem: dict
    params: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    defaults: dict = field(default_factory=dict)


REGISTRY: dict = {}


def register(name, description, problem, params=None, tolerances=None, defaults=None):
    def deco(fn):
        REGISTRY[name] = Experiment(name, fn, description, dict(problem), dict(params or {}),
                                    dict(tolerances or {}), dict(defaults or {}))
        return fn
    return deco


class Context:
    """Objects shared by the experiment bodies, built from a resolved config."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.grid = build_grid(cfg.grid.t0, cfg.grid.T, cfg.grid.N)
        self.problem: Problem = build_problem(cfg.problem, self.grid.T)
        self.basis = RegressionBasis(cfg.basis.degree, tuple(cfg.basis.variables), cfg.basis.ridge)
        self.tol = cfg.tolerances
        self.params = cfg.params

    def driver(self, offset: int = 0, M=None):
        return sample_brownian(self.grid, self.cfg.mc.M if M is None else M, self.cfg.mc.seed + offset,
                               self.cfg.mc.antithetic)

    @property
    def spec(self):
        return self.problem.spec

    @property
    def x0(self):
        return self.problem.x0

    def lq(self):
        if self.problem.lq is None:
            raise ConfigurationError(f"experiment needs an LQ problem, got {self.problem.kind!r}")
        return self.problem.lq

    def riccati(self, driver=None):
        return solve_riccati(self.lq(), self.grid, driver, RegressionBasis(self.basis.degree, ("w",),
                                                                           self.basis.ridge))

    def optimal_run(self, driver, law=None, ric=None):
        """Riccati solution, law, states and LQ adjoint under the optimal (or a given) law."""
        coeffs = self.lq()
        ric = ric or self.riccati(driver)
        law = law or feedback_control(ric, coeffs)
        states = simulate_forward(self.spec, law, self.x0, self.grid, driver)
        k = solve_k_lq(coeffs, self.grid, driver)
        adj = solve_lq_adjoint(coeffs, states, k, driver, self.basis)
        return ric, law, states, adj


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunReport:
    """Dispatch to the registered experiment, then write CSV and manifest."""
    if cfg.experiment not in REGISTRY:
        raise SchemaError(f"unknown experiment {cfg.experiment!r}", ("experiment",))
    exp = REGISTRY[cfg.experiment]
    t0 = time.perf_counter()
    try:
        ctx = Context(cfg)
        rows, extras = exp.fn(ctx)
    except SchemaError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        raise ExperimentError(cfg.experiment, exc) from exc
    wall = time.perf_counter() - t0
    for r in rows:
        r.experiment = cfg.experiment
        r.wall_time = wall
    report = RunReport(cfg.experiment, rows, cfg.to_dict(), wall, extras)
    if write:
        write_report(report, cfg.output_dir)
    return report


# ---------------------------------------------------------------------------
# Riccati
# ---------------------------------------------------------------------------


@register("riccati_fixed_point", "ODE Riccati at a fixed point stays at the terminal weight",
          FIXED_POINT, tolerances={"max_abs": 1e-10})
def _riccati_fixed_point(ctx: Context):
    ric = solve_riccati_ode(ctx.lq(), ctx.grid)
    dev = float(np.max(np.abs(ric.P - ric.P[-1])))
    return [Row("max_abs_P_minus_terminal", dev, 0.0, ctx.tol["max_abs"], kind="max"),
            Row("max_abs_L", float(np.max(np.abs(ric.L))), 0.0, 0.0, kind="max")], {"P0": ric.P[0]}


@register("riccati_cross_validate", "LSMC Riccati on deterministic data matches the ODE solve",
          NONDEGENERATE, tolerances={"rel": 0.05, "clip": 1e-4},
          defaults={"grid": {"N": 50}, "mc": {"M": 20_000}})
def _riccati_cross_validate(ctx: Context):
    ode = solve_riccati_ode(ctx.lq(), ctx.grid)
    lsmc = solve_riccati_lsmc(ctx.lq(), ctx.grid, ctx.driver(),
                              RegressionBasis(ctx.basis.degree, ("w",), ctx.basis.ridge))
    p_ode, p_mc = ode.P0(), lsmc.P0()
    rel = float(np.linalg.norm(p_mc - p_ode) / np.linalg.norm(p_ode))
    return ([Row("P0_rel_diff", rel, 0.0, ctx.tol["rel"], kind="max"),
             Row("max_clip", lsmc.max_clip, 0.0, ctx.tol["clip"], kind="max")],
            {"P0_ode": p_ode, "P0_lsmc": p_mc})


# ---------------------------------------------------------------------------
# LQ value and maximum-principle relations
# ---------------------------------------------------------------------------


@register("lq_value_match", "cost of the Riccati feedback equals <P0 x0, x0>", FIXED_POINT,
          tolerances={"rel": 0.02})
def _lq_value_match(ctx: Context):
    d = ctx.driver()
    ric = ctx.riccati(d)
    law = feedback_control(ric, ctx.lq())
    J, se = cost_functional(ctx.spec, law, ctx.x0, ctx.grid, d, ctx.basis)
    v0 = float(np.mean(lq_value(ric, 0, ctx.x0, d.W[:, 0])[0]))
    return [Row("J_vs_value", J, v0, ctx.tol["rel"] * abs(v0), se)], {"J": J, "value": v0, "mode": ric.mode}


@register("mp_dpp_lq", "adjoint processes equal -2PXk and -2[P(CX+Du)+LX]k", NONDEGENERATE,
          tolerances={"p_rel": 0.05, "q_rel": 0.05})
def _mp_dpp_lq(ctx: Context):
    d = ctx.driver()
    ric, law, states, adj = ctx.optimal_run(d)
    rp, rq = mp_dpp_residual_lq(ric, ctx.lq(), states, adj, d)
    return ([Row("p_rel", rp.rel_rms, 0.0, ctx.tol["p_rel"], kind="max"),
             Row("q_rel", rq.rel_rms, 0.0, ctx.tol["q_rel"], kind="max")],
            {"p_abs": rp.abs_rms, "q_abs": rq.abs_rms, "p0": float(adj.p[:, 0].mean())})


@register("mp_dpp_general", "general adjoint vs value-field derivatives on an LQ instance", NONDEGENERATE,
          tolerances={"p_rel": 0.05, "q_rel": 0.05, "agreement": 0.10})
def _mp_dpp_general(ctx: Context):
    d = ctx.driver()
    ric, law, states, adj_lq = ctx.optimal_run(d)
    bsde = solve_bsde(ctx.spec, states, d, ctx.basis)
    k = solve_k_general(ctx.spec, states, d, bsde)
    adj = solve_adjoint_general(ctx.spec, states, k, bsde, d, ctx.basis)
    rp, rq = mp_dpp_relation_general(lq_value_field(ric), ctx.spec, states, adj, d)
    agree_p = relative(rms(adj.p - adj_lq.p), rms(adj_lq.p))
    agree_q = relative(rms(adj.q - adj_lq.q), rms(adj_lq.q))
    tol = ctx.tol
    return ([Row("p_rel", rp.rel_rms, 0.0, tol["p_rel"], kind="max"),
             Row("q_rel", rq.rel_rms, 0.0, tol["q_rel"], kind="max"),
             Row("p_agreement_with_lq", agree_p, 0.0, tol["agreement"], kind="max"),
             Row("q_agreement_with_lq", agree_q, 0.0, tol["agreement"], kind="max")],
            {"k_min": float(k.min()), "k_max": float(k.max())})


@register("stationarity", "-2kRu + D*q + B*p vanishes under the optimal law only", NONDEGENERATE,
          params={"shift": 0.5}, tolerances={"optimal_rel": 0.05, "perturbed_min_rel": 0.20})
def _stationarity(ctx: Context):
    d = ctx.driver()
    coeffs = ctx.lq()
    ric, law, states, adj = ctx.optimal_run(d)
    opt = stationarity_residual(coeffs, states, adj, d)
    _, _, st2, adj2 = ctx.optimal_run(d, shifted(law, ctx.params["shift"]), ric)
    pert = stationarity_residual(coeffs, st2, adj2, d)
    return ([Row("optimal_rel", opt.rel_rms, 0.0, ctx.tol["optimal_rel"], kind="max"),
             Row("perturbed_rel", pert.rel_rms, ctx.tol["perturbed_min_rel"], 0.0, kind="min")],
            {"optimal_abs": opt.abs_rms, "perturbed_abs": pert.abs_rms})


# ---------------------------------------------------------------------------
# Gateaux derivative and first-order condition
# ---------------------------------------------------------------------------


def _direction(expr: str, driver, grid):
    fn = compile_factor(expr)
    u1 = np.stack([np.broadcast_to(fn(grid.time(s), driver.W[:, s]), (driver.M,)) for s in range(grid.N)],
                  axis=1)[:, :, None]
    if np.any(np.abs(u1) > 1):
        raise ConfigurationError("direction must satisfy |u1| <= 1")
    return u1


@register("gradient_check", "variational derivative vs finite differences and the duality integral",
          NONDEGENERATE, params={"base_gain": -0.5, "base_shift": 0.0, "epsilon": 1e-3,
                                 "direction": "0.5*cos(w)"},
          tolerances={"fd_rel": 0.01, "duality_rel": 0.05})
def _gradient_check(ctx: Context):
    d = ctx.driver()
    spec, grid = ctx.spec, ctx.grid
    p = ctx.params
    base = shifted(linear_feedback(p["base_gain"]), p["base_shift"])
    states = simulate_forward(spec, base, ctx.x0, grid, d)
    bsde = solve_bsde(spec, states, d, ctx.basis)
    u1 = _direction(p["direction"], d, grid)
    var = solve_variational(spec, states, bsde, u1, d, ctx.basis)
    y1, se_y1 = gateaux_derivative(var)
    eps = p["epsilon"]
    frozen = states.frozen_law()
    pert = ControlLaw("open_loop", frozen.k, open_loop=frozen.open_loop + eps * u1, U=frozen.U)
    bsde_eps = solve_bsde(spec, simulate_forward(spec, pert, ctx.x0, grid, d), d, ctx.basis)
    fd = (bsde_eps.value - bsde.value) / eps
    se_fd = d.standard_error((bsde_eps.pathwise - bsde.pathwise) / eps)
    k = solve_k_general(spec, states, d, bsde)
    adj = solve_adjoint_general(spec, states, k, bsde, d, ctx.basis)
    dual, se_dual = duality_integral(spec, states, bsde, adj, u1, d)
    return ([Row("Y1_vs_finite_difference", y1, fd, ctx.tol["fd_rel"] * abs(fd), math.hypot(se_y1, se_fd)),
             Row("Y1_vs_duality", y1, dual, ctx.tol["duality_rel"] * abs(dual), math.hypot(se_y1, se_dual))],
            {"Y1": y1, "fd": fd, "duality": dual, "J": bsde.value})


@register("first_order_condition", "H_u (u - ubar) >= -tol holds at the optimum and fails off it",
          NONDEGENERATE, params={"shift": 0.5, "grid_min": -2.0, "grid_max": 2.0, "grid_points": 21,
                                 "tol_fraction": 0.05},
          tolerances={"optimal_max_fraction": 0.01, "perturbed_min_fraction": 0.10})
def _first_order_condition(ctx: Context):
    d = ctx.driver()
    p = ctx.params
    grid_u = np.linspace(p["grid_min"], p["grid_max"], int(p["grid_points"]))
    ric, law, states, adj = ctx.optimal_run(d)
    runs = {"optimal": (states, adj)}
    _, _, st2, adj2 = ctx.optimal_run(d, shifted(law, p["shift"]), ric)
    runs["perturbed"] = (st2, adj2)
    out, tol = {}, None
    for label, (st, ad) in runs.items():
        bsde = solve_bsde(ctx.spec, st, d, ctx.basis)
        # tolerance scale RMS(k f_u) = RMS(2kRu) is taken from the optimal run for both laws
        out[label] = first_order_condition_check(ctx.spec, st, bsde, ad, grid_u, d, tol=tol,
                                                 tol_fraction=p["tol_fraction"])
        tol = out[label].tol
    return ([Row("optimal_violation_fraction", out["optimal"].violation_fraction, 0.0,
                 ctx.tol["optimal_max_fraction"], kind="max"),
             Row("perturbed_violation_fraction", out["perturbed"].violation_fraction,
                 ctx.tol["perturbed_min_fraction"], 0.0, kind="min")],
            {"tol": out["optimal"].tol, "optimal_worst": out["optimal"].worst,
             "perturbed_worst": out["perturbed"].worst})


# ---------------------------------------------------------------------------
# dynamic programming
# ---------------------------------------------------------------------------


@register("dpp_check", "semigroup of the value over [0, delta] reproduces the value",
          FIXED_POINT, params={"delta_fraction": 0.25, "n_suboptimal": 5, "law_seed": 7},
          tolerances={"rel": 0.02})
def _dpp_check(ctx: Context):
    d = ctx.driver()
    ric = ctx.riccati(d)
    field_ = lq_value_field(ric)
    steps = max(1, int(round(ctx.params["delta_fraction"] * ctx.grid.N)))
    opt = dpp_residual(field_, ctx.spec, feedback_control(ric, ctx.lq()), 0, steps, ctx.x0, d, ctx.basis)
    rows = [Row("residual_optimal", opt.residual, 0.0, ctx.tol["rel"] * abs(opt.value), opt.se)]
    rng = np.random.default_rng(ctx.params["law_seed"])
    laws = []
    for i in range(int(ctx.params["n_suboptimal"])):
        gain = rng.uniform(-2.5, 0.5, size=(ctx.lq().k, ctx.lq().n))
        offset = rng.uniform(0.2, 1.0, size=ctx.lq().k) * rng.choice([-1.0, 1.0], size=ctx.lq().k)
        law = shifted(linear_feedback(gain), offset)
        res = dpp_residual(field_, ctx.spec, law, 0, steps, ctx.x0, d, ctx.basis)
        rows.append(Row(f"residual_suboptimal_{i}", res.residual, 0.0, 0.0, res.se, kind="min"))
        laws.append({"gain": gain, "offset": offset, "residual": res.residual})
    return rows, {"delta_steps": steps, "value": opt.value, "suboptimal": laws}


def _fit_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


@register("hjb_delta_check", "Delta <= 0 on control grids; grid minimum converges at second order",
          NONDEGENERATE, params={"n_points": 64, "point_seed": 3, "spacings": [0.4, 0.2, 0.1, 0.05],
                                 "u_range": 4.0, "x_range": 1.5},
          tolerances={"slope": 0.3, "identity_rel": 1e-12})
def _hjb_delta_check(ctx: Context):
    coeffs = ctx.lq()
    ric = ctx.riccati(ctx.driver() if coeffs.random else None)
    field_ = lq_value_field(ric)
    p = ctx.params
    rng = np.random.default_rng(p["point_seed"])
    m = int(p["n_points"])
    steps = rng.integers(0, ctx.grid.N, size=m)
    xs = rng.uniform(-p["x_range"], p["x_range"], size=(m, coeffs.n))
    ws = rng.normal(0.0, 1.0, size=m) * np.sqrt(ctx.grid.nodes[steps])
    max_delta, ident_u, ident_v, bound_ratio = -np.inf, 0.0, 0.0, 0.0
    errors = np.zeros(len(p["spacings"]))
    for j in range(m):
        s, x, w = int(steps[j]), xs[j:j + 1], ws[j:j + 1]
        c = coeffs.at(ctx.grid.time(s), w)
        P, L = ric.P_at(s, w), ric.L_at(s, w)
        u_star, gamma = hjb_minimizer(P, L, c, x)
        u_fb = np.einsum("mij,mj->mi", feedback_gain(P, L, c), x)
        ident_u = max(ident_u, float(np.max(np.abs(u_star - u_fb)) / (1e-300 + np.max(np.abs(u_fb)))))
        g_star = hjb_delta(field_, ctx.spec, s, x, w, u_star).G[0, 0]
        ident_v = max(ident_v, abs(g_star - gamma[0]) / (1e-300 + abs(gamma[0])))
        _, K = gain_terms(P, L, c)
        kmax = float(np.max(np.linalg.eigvalsh(K[0])))
        for i, h in enumerate(p["spacings"]):
            grid_u = np.arange(-p["u_range"], p["u_range"] + h / 2, h)
            rep = hjb_delta(field_, ctx.spec, s, x, w, grid_u)
            max_delta = max(max_delta, float(rep.delta.max()))
            err = float(rep.gamma[0] - g_star)
            errors[i] = max(errors[i], err)
            bound_ratio = max(bound_ratio, err / (kmax * h * h / 4))
    slope = _fit_slope(p["spacings"], errors)
    tol = ctx.tol
    return ([Row("max_delta_on_grid", max_delta, 0.0, 0.0, kind="max"),
             Row("minimizer_identity_rel", ident_u, 0.0, tol["identity_rel"], kind="max"),
             Row("infimum_identity_rel", ident_v, 0.0, tol["identity_rel"], kind="max"),
             Row("grid_error_slope", slope, 2.0, tol["slope"]),
             Row("grid_error_bound_ratio", bound_ratio, 1.0, 1e-9, kind="max")],
            {"errors": errors.tolist(), "spacings": list(p["spacings"])})


# ---------------------------------------------------------------------------
# forward scheme
# ---------------------------------------------------------------------------


@register("sde_convergence", "Euler-Maruyama strong error on geometric Brownian motion", GBM,
          params={"error_constant": 1.0})
def _sde_convergence(ctx: Context):
    prob = ctx.cfg.problem
    if ctx.problem.kind != "gbm":
        raise ConfigurationError("sde_convergence needs the gbm problem")
    mu, sig = float(prob.get("mu", 0.1)), float(prob.get("sigma", 0.2))
    d = ctx.driver()
    law = ControlLaw("open_loop", 1, open_loop=np.zeros((d.M, ctx.grid.N, 1)))
    states = simulate_forward(ctx.spec, law, ctx.x0, ctx.grid, d)
    T = ctx.grid.T - ctx.grid.t0
    exact = ctx.x0[0] * np.exp((mu - 0.5 * sig ** 2) * T + sig * d.W[:, -1])
    err = np.abs(states.X[:, -1, 0] - exact)
    bound = ctx.params["error_constant"] * math.sqrt(ctx.grid.dt)
    return [Row("strong_error", float(err.mean()), 0.0, bound, d.standard_error(err), kind="max")], {}
