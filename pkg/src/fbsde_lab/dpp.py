"""Dynamic-programming side: value fields, DPP residuals, the HJB Delta-function
and the relation between the adjoint processes and value-field derivatives.

A value field supplies ``V(s, x, w)`` and ``Psi(s, x, w)`` (the martingale
density of the random field ``V``), together with ``V_x, V_xx, Psi_x``.  The
field is assumed to solve the backward HJB equation, so the drift is
recovered as ``Gamma = inf_u G(s, x, V, Psi, V_x, Psi_x, V_xx, u)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .bsde import RegressionBasis, backward_semigroup, cost_functional
from .core import BrownianDriver, ControlLaw, ControlSet, ProblemSpec, TimeGrid
from .errors import ConfigurationError
from .hamilton import (AdjointTriple, HamiltonianInputs, ResidualSummary, generalized_hamiltonian,
                       residual_summary)
from .lq import RiccatiSolution
from .sde import StatePaths

FD_STEP = 1e-4


def _fd_gradient(fn, s, x, w):
    M, n = x.shape
    g = np.empty((M, n))
    for j in range(n):
        h = FD_STEP * (1.0 + np.abs(x[:, j]))
        e = np.zeros_like(x)
        e[:, j] = h
        g[:, j] = (fn(s, x + e, w) - fn(s, x - e, w)) / (2 * h)
    return g


def _fd_hessian(fn, s, x, w):
    M, n = x.shape
    H = np.empty((M, n, n))
    hs = FD_STEP * (1.0 + np.abs(x))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros_like(x)
            ej = np.zeros_like(x)
            ei[:, i] = hs[:, i]
            ej[:, j] = hs[:, j]
            val = (fn(s, x + ei + ej, w) - fn(s, x + ei - ej, w)
                   - fn(s, x - ei + ej, w) + fn(s, x - ei - ej, w)) / (4 * hs[:, i] * hs[:, j])
            H[:, i, j] = H[:, j, i] = val
    return H


@dataclass(frozen=True, eq=False)
class ValueField:
    """Candidate value field on a time grid.

    ``V`` and ``Psi`` map ``(step, x (M, n), w (M,)) -> (M,)``.  Missing
    derivative maps fall back to central differences in ``x`` with step
    ``1e-4 (1 + |x|)``.
    """

    grid: TimeGrid
    V: Callable
    Psi: Callable
    Vx: Optional[Callable] = None
    Vxx: Optional[Callable] = None
    Psix: Optional[Callable] = None
    label: str = ""

    def value(self, s, x, w):
        return np.asarray(self.V(s, x, w), dtype=float)

    def psi(self, s, x, w):
        return np.asarray(self.Psi(s, x, w), dtype=float)

    def grad(self, s, x, w):
        return np.asarray(self.Vx(s, x, w), dtype=float) if self.Vx else _fd_gradient(self.V, s, x, w)

    def hess(self, s, x, w):
        return np.asarray(self.Vxx(s, x, w), dtype=float) if self.Vxx else _fd_hessian(self.V, s, x, w)

    def psi_grad(self, s, x, w):
        return np.asarray(self.Psix(s, x, w), dtype=float) if self.Psix else _fd_gradient(self.Psi, s, x, w)

    def check_terminal(self, spec: ProblemSpec, x, w, rtol: float = 1e-10) -> float:
        """Largest deviation of ``V(N, x, w)`` from ``h(x)`` (raises above ``rtol``)."""
        v = self.value(self.grid.N, x, w)
        h = np.asarray(spec.h(x, w))
        err = float(np.max(np.abs(v - h)))
        if err > rtol * (1 + float(np.max(np.abs(h)))):
            raise ConfigurationError(f"value field violates the terminal condition by {err:.3g}")
        return err


def lq_value_field(riccati: RiccatiSolution) -> ValueField:
    """``V = <P x, x>``, ``Psi = <L x, x>`` with analytic derivatives."""

    def quad(mat):
        return lambda s, x, w: np.einsum("mi,mij,mj->m", x, mat(s, w), x)

    def lin(mat):
        return lambda s, x, w: 2 * np.einsum("mij,mj->mi", mat(s, w), x)

    return ValueField(
        riccati.grid,
        V=quad(riccati.P_at),
        Psi=quad(riccati.L_at),
        Vx=lin(riccati.P_at),
        Vxx=lambda s, x, w: 2 * riccati.P_at(s, w),
        Psix=lin(riccati.L_at),
        label=f"lq({riccati.mode})",
    )


def field_hamiltonian_inputs(field: ValueField, s: int, x, w, u) -> HamiltonianInputs:
    """Generalized-Hamiltonian arguments ``(V, Psi, V_x, Psi_x, V_xx)`` at ``(s, x, w)``."""
    return HamiltonianInputs(
        t=field.grid.time(s), x=x, y=field.value(s, x, w), z=field.psi(s, x, w),
        p=field.grad(s, x, w), q=field.psi_grad(s, x, w), k=np.zeros(x.shape[0]),
        u=u, w=w, A=field.hess(s, x, w),
    )


@dataclass(frozen=True, eq=False)
class DeltaReport:
    gamma: np.ndarray  # (M,) Gamma-hat = min over the grid
    G: np.ndarray  # (M, n_grid)
    delta: np.ndarray  # (M, n_grid) = gamma - G <= 0
    argmin: np.ndarray  # (M, k)


def _control_grid(control_grid, k: int) -> np.ndarray:
    g = np.asarray(control_grid, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.size == 0 or g.shape[1] != k:
        raise ConfigurationError("control grid is empty or has the wrong dimension")
    return g


def hjb_delta(field: ValueField, spec: ProblemSpec, t_index: int, x, w, control_grid) -> DeltaReport:
    """``Delta(s, x, u) = Gamma_hat(s, x) - G(s, x, ..., u)`` for every grid control."""
    grid_u = _control_grid(control_grid, spec.k)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = np.broadcast_to(np.asarray(w, dtype=float), (x.shape[0],))
    M = x.shape[0]
    vals = np.empty((M, grid_u.shape[0]))
    for j, u in enumerate(grid_u):
        inp = field_hamiltonian_inputs(field, t_index, x, w, np.broadcast_to(u, (M, spec.k)))
        vals[:, j] = generalized_hamiltonian(inp, spec)
    jmin = np.argmin(vals, axis=1)
    gamma = vals[np.arange(M), jmin]
    return DeltaReport(gamma, vals, gamma[:, None] - vals, grid_u[jmin])


def delta_function(field: ValueField, spec: ProblemSpec, t_index: int, x, w, u, control_grid) -> np.ndarray:
    """``Gamma_hat - G(..., u)`` at a single control ``u`` (need not lie on the grid)."""
    rep = hjb_delta(field, spec, t_index, x, w, control_grid)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    w = np.broadcast_to(np.asarray(w, dtype=float), (x.shape[0],))
    uu = np.broadcast_to(np.asarray(u, dtype=float).reshape(-1, spec.k), (x.shape[0], spec.k))
    return rep.gamma - generalized_hamiltonian(field_hamiltonian_inputs(field, t_index, x, w, uu), spec)


@dataclass(frozen=True)
class DppResidual:
    residual: float
    se: float
    semigroup: float
    value: float


def dpp_residual(field: ValueField, spec: ProblemSpec, law: ControlLaw, t_index: int, delta_steps: int,
                 x, driver: BrownianDriver, basis: RegressionBasis) -> DppResidual:
    """``G_{t, t+delta}(V(t+delta, X_{t+delta})) - V(t, x)`` under ``law``.

    Nonnegative up to noise for any law; near zero for an optimal one.
    """
    grid = driver.grid
    grid.check_index(t_index)
    M = driver.M
    x = np.asarray(x, dtype=float)
    xs = np.broadcast_to(x.reshape(-1, spec.n) if x.ndim < 2 else x, (M, spec.n))
    v0 = float(np.mean(field.value(t_index, np.ascontiguousarray(xs), driver.W[:, t_index])))
    if delta_steps == 0:
        return DppResidual(0.0, 0.0, v0, v0)
    end = t_index + delta_steps
    res = backward_semigroup(spec, law, t_index, delta_steps, xs, lambda X, W: field.value(end, X, W),
                             driver, basis)
    return DppResidual(res.value - v0, res.se, res.value, v0)


def mp_dpp_relation_general(field: ValueField, spec: ProblemSpec, states: StatePaths,
                            adjoint: AdjointTriple, driver: BrownianDriver):
    """Residuals of ``p = -V_x k`` and ``q = -[V_xx sigma + V_x f_z + Psi_x] k``.

    ``f_z`` is evaluated at ``(s, X, V, sigma* V_x + Psi, u)``.  Returns
    ``(p_summary, q_summary)``.
    """
    grid = states.grid
    rp, rq, ps, qs = [], [], [], []
    for s in range(states.start, grid.N):
        t = grid.time(s)
        X, u, w = states.X[:, s], states.U[:, s], driver.W[:, s]
        k = adjoint.k[:, s, None]
        Vx = field.grad(s, X, w)
        sig = spec.sigma(t, X, u, w)
        zarg = np.einsum("mi,mi->m", sig, Vx) + field.psi(s, X, w)
        fz = spec.partial("f_z", t, X, field.value(s, X, w), zarg, u, w)
        ref_p = -Vx * k
        ref_q = -(np.einsum("mij,mj->mi", field.hess(s, X, w), sig) + Vx * fz[:, None]
                  + field.psi_grad(s, X, w)) * k
        rp.append(adjoint.p[:, s] - ref_p)
        rq.append(adjoint.q[:, s] - ref_q)
        ps.append(adjoint.p[:, s])
        qs.append(adjoint.q[:, s])
    stack = lambda a: np.stack(a, axis=1)  # noqa: E731
    return residual_summary("p", stack(rp), stack(ps)), residual_summary("q", stack(rq), stack(qs))


@dataclass(frozen=True, eq=False)
class ExhaustiveResult:
    value: float
    se: float
    controls: tuple  # best control value per macro step
    values: np.ndarray  # cost of every enumerated sequence, in enumeration order


def piecewise_constant_law(controls, t_index: int, grid: TimeGrid, M: int, k: int,
                           U: Optional[ControlSet] = None) -> ControlLaw:
    """Open-loop law constant on equal sub-intervals of ``[t_index, N)``."""
    arr = np.zeros((M, grid.N, k))
    blocks = np.array_split(np.arange(t_index, grid.N), len(controls))
    for block, c in zip(blocks, controls):
        arr[:, block] = np.asarray(c, dtype=float).reshape(k)
    return ControlLaw("open_loop", k, open_loop=arr, U=U or ControlSet(k), label=f"piecewise{list(controls)}")


def exhaustive_value(spec: ProblemSpec, t_index: int, x, control_grid, macro_steps: int,
                     grid: TimeGrid, driver: BrownianDriver, basis: RegressionBasis,
                     cap: int = 10_000) -> ExhaustiveResult:
    """Minimum of ``J`` over piecewise-constant controls with values in ``control_grid``.

    Sequences are enumerated lexicographically (grid sorted ascending) and only
    a strictly smaller cost replaces the incumbent, so ties go to the
    lexicographically smallest sequence.  An upper bound on the value.
    """
    if macro_steps < 1:
        raise ConfigurationError("macro_steps must be >= 1")
    if macro_steps > grid.N - t_index:
        raise ConfigurationError("more macro steps than time steps")
    g = _control_grid(control_grid, spec.k)
    g = g[np.lexsort(g.T[::-1])]
    total = g.shape[0] ** macro_steps
    if total > cap:
        raise ConfigurationError(f"{total} control sequences exceed the enumeration cap {cap}")
    best, best_se, best_seq = np.inf, 0.0, None
    values = np.empty(total)
    for i, seq in enumerate(itertools.product(range(g.shape[0]), repeat=macro_steps)):
        ctrl = tuple(tuple(g[j]) for j in seq)
        law = piecewise_constant_law(ctrl, t_index, grid, driver.M, spec.k)
        v, se = cost_functional(spec, law, x, grid, driver, basis, t_index=t_index)
        values[i] = v
        if v < best:
            best, best_se, best_seq = v, se, ctrl
    return ExhaustiveResult(float(best), float(best_se), best_seq, values)


__all__ = [
    "DeltaReport", "DppResidual", "ExhaustiveResult", "ResidualSummary", "ValueField", "delta_function",
    "dpp_residual", "exhaustive_value", "field_hamiltonian_inputs", "hjb_delta", "lq_value_field",
    "mp_dpp_relation_general", "piecewise_constant_law",
]
