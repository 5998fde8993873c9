"""Maximum-principle machinery: Hamiltonians, the adjoint FBSDE, the variational
system, Gateaux derivatives of the recursive cost and first-order checks.

Sign conventions::

    H(t,x,y,z,p,q,k,u) = <p, b> + <q, sigma> - k f
    dk = k f_y dt + k f_z dW,          k_0 = -1
    dp = -H_x dt + q dW,               p_T = -h_x(X_T) k_T

The backward adjoint is solved in the rescaled form ``phat = p / k`` (Ito's
rule on the ratio):

    dphat = -[(b_x* + f_y + f_z sigma_x*) phat + (sigma_x* + f_z) qhat - f_x] dt + qhat dW
    phat_T = -h_x,   p = k phat,   q = k (qhat + f_z phat)

which is again linear with coefficients that are functions of the Markov
state ``(X, W)``, so ``k`` never has to enter the regression basis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bsde import BsdeSolution, RegressionBasis, regressor_map, solve_linear_bsde
from .core import BrownianDriver, ProblemSpec, mc_standard_error
from .errors import ConfigurationError, SimulationBlowupError
from .sde import StatePaths


@dataclass(frozen=True, eq=False)
class HamiltonianInputs:
    """Arguments of H and of the generalized Hamiltonian, vectorized over paths.

    ``x, p, q`` are ``(M, n)``; ``y, z, k, w`` are ``(M,)``; ``u`` is ``(M, k)``;
    ``A`` (generalized Hamiltonian only) is ``(M, n, n)`` symmetric.
    """

    t: float
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    p: np.ndarray
    q: np.ndarray
    k: np.ndarray
    u: np.ndarray
    w: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None

    def level(self) -> np.ndarray:
        return np.zeros(self.x.shape[0]) if self.w is None else self.w


def _dot(a, b):
    return np.einsum("mi,mi->m", a, b)


def hamiltonian(inp: HamiltonianInputs, spec: ProblemSpec) -> np.ndarray:
    w = inp.level()
    b = spec.b(inp.t, inp.x, inp.u, w)
    s = spec.sigma(inp.t, inp.x, inp.u, w)
    f = spec.f(inp.t, inp.x, inp.y, inp.z, inp.u, w)
    return _dot(inp.p, b) + _dot(inp.q, s) - inp.k * f


def generalized_hamiltonian(inp: HamiltonianInputs, spec: ProblemSpec) -> np.ndarray:
    """``<p,b> + <q,sigma> + tr(sigma sigma* A)/2 + f(t, x, y, sigma* p + z, u)``."""
    if inp.A is None:
        raise ConfigurationError("generalized Hamiltonian needs the second-order argument A")
    w = inp.level()
    b = spec.b(inp.t, inp.x, inp.u, w)
    s = spec.sigma(inp.t, inp.x, inp.u, w)
    trace = 0.5 * np.einsum("mi,mij,mj->m", s, inp.A, s)
    f = spec.f(inp.t, inp.x, inp.y, _dot(s, inp.p) + inp.z, inp.u, w)
    return _dot(inp.p, b) + _dot(inp.q, s) + trace + f


def hamiltonian_u(inp: HamiltonianInputs, spec: ProblemSpec) -> np.ndarray:
    """``H_u = b_u* p + sigma_u* q - k f_u``, shape ``(M, k)``."""
    w = inp.level()
    bu = spec.partial("b_u", inp.t, inp.x, inp.u, w)
    su = spec.partial("sigma_u", inp.t, inp.x, inp.u, w)
    fu = spec.partial("f_u", inp.t, inp.x, inp.y, inp.z, inp.u, w)
    return (np.einsum("mij,mi->mj", bu, inp.p) + np.einsum("mij,mi->mj", su, inp.q)
            - inp.k[:, None] * fu)


@dataclass(frozen=True, eq=False)
class AdjointTriple:
    p: np.ndarray  # (M, N+1, n)
    q: np.ndarray  # (M, N, n)
    k: np.ndarray  # (M, N+1)
    solution: Optional[BsdeSolution] = None


def inputs_at(s: int, states: StatePaths, bsde: BsdeSolution, driver: BrownianDriver,
              adjoint: Optional[AdjointTriple] = None, u=None) -> HamiltonianInputs:
    """Hamiltonian arguments along the paths at step ``s``."""
    M, n = states.M, states.n
    zeros = np.zeros((M, n))
    return HamiltonianInputs(
        t=states.grid.time(s),
        x=states.X[:, s],
        y=bsde.Y[:, s],
        z=bsde.Z[:, s],
        p=adjoint.p[:, s] if adjoint is not None else zeros,
        q=adjoint.q[:, s] if adjoint is not None else zeros,
        k=adjoint.k[:, s] if adjoint is not None else np.zeros(M),
        u=states.U[:, s] if u is None else u,
        w=driver.W[:, s],
    )


def _driver_partials(spec, states, bsde, driver, s):
    t = states.grid.time(s)
    args = (t, states.X[:, s], bsde.Y[:, s], bsde.Z[:, s], states.U[:, s], driver.W[:, s])
    return args


def solve_k_general(spec: ProblemSpec, states: StatePaths, driver: BrownianDriver,
                    bsde: BsdeSolution) -> np.ndarray:
    """Forward Euler-Maruyama for ``dk = k f_y dt + k f_z dW``, ``k_0 = -1``."""
    grid = states.grid
    M = states.M
    k = np.full((M, grid.N + 1), np.nan)
    k[:, states.start] = -1.0
    dt = grid.dt
    for s in range(states.start, grid.N):
        args = _driver_partials(spec, states, bsde, driver, s)
        fy = spec.partial("f_y", *args)
        fz = spec.partial("f_z", *args)
        k[:, s + 1] = k[:, s] * (1.0 + fy * dt + fz * driver.increments[:, s])
        if not np.all(np.isfinite(k[:, s + 1])):
            raise SimulationBlowupError(s, int(np.argmin(np.isfinite(k[:, s + 1]))), "multiplier k")
    return k


def solve_adjoint_general(spec: ProblemSpec, states: StatePaths, k: np.ndarray, bsde: BsdeSolution,
                          driver: BrownianDriver, basis: RegressionBasis) -> AdjointTriple:
    """Backward adjoint ``(p, q)`` for the recursive problem via the ``p/k`` form."""
    grid = states.grid
    M, n, N = states.M, states.n, grid.N
    alpha = np.zeros((M, N, n, n))
    beta = np.zeros((M, N, n, n))
    gamma = np.zeros((M, N, n))
    fz_all = np.zeros((M, N))
    eye = np.eye(n)
    for s in range(states.start, N):
        t = grid.time(s)
        x, u, w = states.X[:, s], states.U[:, s], driver.W[:, s]
        args = _driver_partials(spec, states, bsde, driver, s)
        bx = spec.partial("b_x", t, x, u, w)
        sx = spec.partial("sigma_x", t, x, u, w)
        fx = spec.partial("f_x", *args)
        fy = spec.partial("f_y", *args)
        fz = spec.partial("f_z", *args)
        bxT = np.swapaxes(bx, 1, 2)
        sxT = np.swapaxes(sx, 1, 2)
        alpha[:, s] = bxT + fy[:, None, None] * eye + fz[:, None, None] * sxT
        beta[:, s] = sxT + fz[:, None, None] * eye
        gamma[:, s] = -fx
        fz_all[:, s] = fz
    terminal = -spec.partial("h_x", states.X[:, N], driver.W[:, N])
    sol = solve_linear_bsde(terminal, alpha, beta, gamma, regressor_map(states, driver), grid,
                            driver, basis, start=states.start)
    p = k[:, :, None] * sol.Y
    q = k[:, :N, None] * (sol.Z + fz_all[:, :, None] * sol.Y[:, :N])
    return AdjointTriple(p, q, k, sol)


@dataclass(frozen=True, eq=False)
class VariationalSolution:
    X1: np.ndarray  # (M, N+1, n)
    Y1: np.ndarray  # (M, N+1)
    Z1: np.ndarray  # (M, N)
    u1: np.ndarray  # (M, N, k)
    solution: BsdeSolution


def solve_variational(spec: ProblemSpec, states: StatePaths, bsde: BsdeSolution, u1: np.ndarray,
                      driver: BrownianDriver, basis: RegressionBasis) -> VariationalSolution:
    """First-order expansion of the state and cost along the direction ``u1``.

    ``X1`` solves the linearized forward equation from 0; ``(Y1, Z1)`` the
    linear BSDE with driver ``f_x X1 + f_y Y1 + f_z Z1 + f_u u1`` and terminal
    ``h_x X1_T``.  ``X1`` is added to the regression variables, since ``Y1`` is
    a function of ``(X, W, X1)``.
    """
    grid = states.grid
    M, n, N = states.M, states.n, grid.N
    u1 = np.asarray(u1, dtype=float)
    if u1.ndim == 2:
        u1 = u1[:, :, None]
    if u1.shape != (M, N, states.U.shape[2]):
        raise ConfigurationError(f"direction must have shape {(M, N, states.U.shape[2])}")
    if np.any(np.linalg.norm(u1, axis=2) > 1 + 1e-12):
        raise ConfigurationError("direction must satisfy |u1| <= 1")
    dt = grid.dt
    X1 = np.zeros((M, N + 1, n))
    alpha = np.zeros((M, N))
    beta = np.zeros((M, N))
    gamma = np.zeros((M, N))
    for s in range(states.start, N):
        t = grid.time(s)
        x, u, w = states.X[:, s], states.U[:, s], driver.W[:, s]
        bx = spec.partial("b_x", t, x, u, w)
        bu = spec.partial("b_u", t, x, u, w)
        sx = spec.partial("sigma_x", t, x, u, w)
        su = spec.partial("sigma_u", t, x, u, w)
        drift = np.einsum("mij,mj->mi", bx, X1[:, s]) + np.einsum("mij,mj->mi", bu, u1[:, s])
        vol = np.einsum("mij,mj->mi", sx, X1[:, s]) + np.einsum("mij,mj->mi", su, u1[:, s])
        X1[:, s + 1] = X1[:, s] + drift * dt + vol * driver.increments[:, s, None]
        args = _driver_partials(spec, states, bsde, driver, s)
        alpha[:, s] = spec.partial("f_y", *args)
        beta[:, s] = spec.partial("f_z", *args)
        gamma[:, s] = _dot(spec.partial("f_x", *args), X1[:, s]) + _dot(spec.partial("f_u", *args), u1[:, s])
    terminal = _dot(spec.partial("h_x", states.X[:, N], driver.W[:, N]), X1[:, N])
    regs = regressor_map(states, driver, {"x1": X1})
    sol = solve_linear_bsde(terminal, alpha, beta, gamma, regs, grid, driver,
                            basis.with_variables("x1"), start=states.start)
    return VariationalSolution(X1, sol.Y, sol.Z, u1, sol)


def gateaux_derivative(var: VariationalSolution):
    """``Y1_0`` (mean over paths) and its standard error."""
    return var.solution.value, var.solution.se


def duality_integral(spec: ProblemSpec, states: StatePaths, bsde: BsdeSolution,
                     adjoint: AdjointTriple, u1: np.ndarray, driver: BrownianDriver):
    """``E sum_k H_u(k) u1_k dt`` along the paths, with its standard error."""
    u1 = np.asarray(u1, dtype=float)
    if u1.ndim == 2:
        u1 = u1[:, :, None]
    grid = states.grid
    acc = np.zeros(states.M)
    for s in range(states.start, grid.N):
        hu = hamiltonian_u(inputs_at(s, states, bsde, driver, adjoint), spec)
        acc += np.einsum("mj,mj->m", hu, u1[:, s]) * grid.dt
    return float(acc.mean()), driver.standard_error(acc)


@dataclass(frozen=True)
class FocReport:
    violation_fraction: float
    worst: float
    tol: float
    n_checks: int


def first_order_condition_check(spec: ProblemSpec, states: StatePaths, bsde: BsdeSolution,
                                adjoint: AdjointTriple, control_grid, driver: BrownianDriver,
                                tol: Optional[float] = None, tol_fraction: float = 0.05,
                                tol_scale: Optional[float] = None,
                                normalize: bool = True) -> FocReport:
    """Check ``H_u (u - ubar) >= -tol`` for every path, step and grid control.

    With ``normalize`` the direction is ``(u - ubar) / (|u - ubar| v 1)``.  When
    ``tol`` is not given it is ``tol_fraction * tol_scale`` with ``tol_scale``
    defaulting to the RMS of ``k f_u`` along the paths.
    """
    grid_u = np.asarray(control_grid, dtype=float)
    if grid_u.ndim == 1:
        grid_u = grid_u[:, None]
    if grid_u.shape[0] == 0:
        raise ConfigurationError("empty control grid")
    N = states.grid.N
    hus, scale_terms = [], []
    for s in range(states.start, N):
        inp = inputs_at(s, states, bsde, driver, adjoint)
        hus.append(hamiltonian_u(inp, spec))
        fu = spec.partial("f_u", inp.t, inp.x, inp.y, inp.z, inp.u, inp.level())
        scale_terms.append(inp.k[:, None] * fu)
    Hu = np.stack(hus, axis=1)  # (M, S, k)
    ubar = states.U[:, states.start:N]
    if tol is None:
        scale = tol_scale if tol_scale is not None else float(np.sqrt(np.mean(np.stack(scale_terms) ** 2)))
        tol = tol_fraction * scale
    diff = grid_u[None, None, :, :] - ubar[:, :, None, :]  # (M, S, G, k)
    if normalize:
        diff = diff / np.maximum(np.linalg.norm(diff, axis=-1, keepdims=True), 1.0)
    prod = np.einsum("msk,msgk->msg", Hu, diff)
    viol = prod < -tol
    return FocReport(float(viol.mean()), float(prod.min()), float(tol), int(prod.size))


def rms(a) -> float:
    a = np.asarray(a, dtype=float)
    return float(np.sqrt(np.mean(a ** 2))) if a.size else 0.0


def relative(num: float, den: float, atol: float = 1e-9) -> float:
    """``num / den`` with ``0/0 := 0``."""
    if den <= atol:
        return 0.0 if num <= atol else float("inf")
    return num / den



@dataclass(frozen=True, eq=False)
class ResidualSummary:
    """RMS residuals, absolute and relative to the RMS of the reference quantity."""

    name: str
    residual: np.ndarray
    abs_rms: float
    rel_rms: float

    def as_dict(self) -> dict:
        return {f"{self.name}_abs": self.abs_rms, f"{self.name}_rel": self.rel_rms}


def residual_summary(name, residual, reference):
    a = rms(residual)
    return ResidualSummary(name, residual, a, relative(a, rms(reference), 1e-12 * (1 + rms(reference))))


__all__ = [
    "AdjointTriple", "FocReport", "ResidualSummary", "residual_summary", "HamiltonianInputs", "VariationalSolution", "duality_integral",
    "first_order_condition_check", "gateaux_derivative", "generalized_hamiltonian", "hamiltonian",
    "hamiltonian_u", "inputs_at", "mc_standard_error", "relative", "rms", "solve_adjoint_general",
    "solve_k_general", "solve_variational",
]
