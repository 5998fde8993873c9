"""Backward least-squares Monte Carlo for BSDEs, the recursive cost and the backward semigroup.

One backward step on ``[s_k, s_{k+1}]``::

    Yhat_k = E_k[Y_{k+1}]                                  (regression)
    Z_k    = E_k[(Y_{k+1} - Yhat_k) dW_k] / dt             (regression)
    Y_k    = Yhat_k + dt * f(s_k, X_k, Yhat_k, Z_k, u_k)

``E_k`` is a least-squares projection on polynomial features of the Markov
state at node k.  Subtracting ``Yhat_k`` in the Z target leaves its
expectation unchanged and removes most of its variance.  The scheme is
explicit, so ``dt`` must stay below ``1/(2K)`` for a driver with Lipschitz
constant K in ``(y, z)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import BrownianDriver, ControlLaw, ProblemSpec, TimeGrid
from .errors import ConfigurationError, RegressionError
from .sde import StatePaths, restart_forward


@dataclass(frozen=True)
class RegressionBasis:
    """Total-degree polynomial features in the named regressors.

    ``variables`` names entries of the regressor mapping handed to
    :meth:`design`; ``"x"`` expands to every state component.  The constant
    function is always the first feature.
    """

    degree: int = 2
    variables: tuple = ("x", "w")
    ridge: float = 1e-8

    def __post_init__(self):
        if self.degree < 0:
            raise ConfigurationError("basis degree must be >= 0")
        if self.ridge < 0:
            raise ConfigurationError("ridge must be >= 0")
        object.__setattr__(self, "variables", tuple(self.variables))

    def with_variables(self, *extra: str) -> "RegressionBasis":
        vs = self.variables + tuple(v for v in extra if v not in self.variables)
        return RegressionBasis(self.degree, vs, self.ridge)

    def n_features(self, n_vars: int) -> int:
        return math.comb(self.degree + n_vars, self.degree)

    def columns(self, regs: dict) -> np.ndarray:
        cols = []
        for name in self.variables:
            if name not in regs:
                raise ConfigurationError(f"basis variable {name!r} not available (have {sorted(regs)})")
            v = np.asarray(regs[name], dtype=float)
            cols.append(v[:, None] if v.ndim == 1 else v.reshape(v.shape[0], -1))
        return np.concatenate(cols, axis=1) if cols else np.zeros((0, 0))

    def design(self, regs: dict) -> np.ndarray:
        V = self.columns(regs)
        M, nv = V.shape
        feats = [np.ones(M)]
        for d in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(nv), d):
                feats.append(np.prod(V[:, combo], axis=1))
        return np.stack(feats, axis=1)


class Projector:
    """Least-squares projection onto the column span of a design matrix.

    Columns that are constant across paths are absorbed by the intercept; the
    rest are standardized and ridge-penalized (intercept unpenalized).
    """

    def __init__(self, design: np.ndarray, ridge: float):
        M = design.shape[0]
        mean = design.mean(axis=0)
        scale = design.std(axis=0)
        keep = scale > 1e-12 * (1.0 + np.abs(mean))
        keep[0] = False
        self.keep, self.mean, self.scale, self.ridge = keep, mean[keep], scale[keep], ridge
        S = (design[:, keep] - self.mean) / self.scale
        self.S = S
        p = S.shape[1]
        if p:
            G = S.T @ S / M + ridge * np.eye(p)
            if ridge == 0 and (M <= p or np.linalg.matrix_rank(S) < p):
                raise RegressionError(
                    f"rank-deficient design ({M} paths, {p} non-constant features); use ridge > 0"
                )
            try:
                self.chol = np.linalg.cholesky(G)
            except np.linalg.LinAlgError as exc:
                raise RegressionError("normal equations not positive definite; increase ridge") from exc
        self.p = p
        self.M = M

    def coef(self, targets: np.ndarray):
        """(intercept, slopes) in standardized coordinates."""
        Y = targets.reshape(self.M, -1)
        c0 = Y.mean(axis=0)
        if not self.p:
            return c0, np.zeros((0, Y.shape[1]))
        rhs = self.S.T @ (Y - c0) / self.M
        beta = np.linalg.solve(self.chol.T, np.linalg.solve(self.chol, rhs))
        return c0, beta

    def __call__(self, targets: np.ndarray) -> np.ndarray:
        c0, beta = self.coef(targets)
        fitted = c0 + self.S @ beta if self.p else np.broadcast_to(c0, (self.M, c0.size))
        return np.asarray(fitted).reshape(targets.shape)

    def fit(self, targets: np.ndarray) -> "FittedMap":
        c0, beta = self.coef(targets)
        return FittedMap(self.keep, self.mean, self.scale, c0, beta, targets.shape[1:])


@dataclass(frozen=True, eq=False)
class FittedMap:
    """A fitted regression usable at new feature rows."""

    keep: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    c0: np.ndarray
    beta: np.ndarray
    tail: tuple

    def __call__(self, design: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.c0, (design.shape[0], self.c0.size)).copy()
        if self.beta.shape[0]:
            out += ((design[:, self.keep] - self.mean) / self.scale) @ self.beta
        return out.reshape((design.shape[0],) + self.tail)


@dataclass(frozen=True, eq=False)
class BsdeSolution:
    """Backward values on nodes ``start..end`` (NaN elsewhere).

    ``pathwise`` is ``Y_end + sum_k dt * generator_k`` along each path; its
    mean equals the mean of ``Y[:, start]`` (the projections keep means) and it
    carries the Monte Carlo standard error ``se``.
    """

    Y: np.ndarray  # (M, N+1) or (M, N+1, d)
    Z: np.ndarray  # (M, N)   or (M, N, d)
    grid: TimeGrid
    start: int
    end: int
    pathwise: np.ndarray
    se: float

    @property
    def value(self) -> float:
        return float(np.mean(self.Y[:, self.start]))


def regressor_map(states: StatePaths, driver: BrownianDriver, extra: Optional[dict] = None) -> Callable:
    """Per-node regressors ``{"x": X_k, "w": W_k, **extra_k}``."""
    extra = extra or {}

    def at(s: int) -> dict:
        regs = {"x": states.X[:, s], "w": driver.W[:, s]}
        for name, arr in extra.items():
            regs[name] = arr[:, s]
        return regs

    return at


def backward_induction(terminal: np.ndarray, generator: Callable, regressors: Callable,
                       grid: TimeGrid, driver: BrownianDriver, basis: RegressionBasis,
                       start: int = 0, end: Optional[int] = None) -> BsdeSolution:
    """Generic explicit LSMC backward scheme.

    ``generator(s, t, yhat, z)`` returns the driver value with the shape of
    ``terminal``; ``regressors(s)`` returns the mapping fed to the basis.
    """
    end = grid.N if end is None else end
    grid.check_index(start, "start")
    grid.check_index(end, "end")
    if start > end:
        raise ConfigurationError("start node after end node")
    terminal = np.asarray(terminal, dtype=float)
    M = terminal.shape[0]
    tail = terminal.shape[1:]
    Y = np.full((M, grid.N + 1) + tail, np.nan)
    Z = np.full((M, grid.N) + tail, np.nan)
    Y[:, end] = terminal
    acc = terminal.copy()
    dt = grid.dt
    for s in range(end - 1, start - 1, -1):
        t = grid.time(s)
        proj = Projector(basis.design(regressors(s)), basis.ridge)
        nxt = Y[:, s + 1]
        yhat = proj(nxt)
        dw = driver.increments[:, s].reshape((M,) + (1,) * len(tail))
        z = proj((nxt - yhat) * dw / dt)
        g = np.asarray(generator(s, t, yhat, z), dtype=float)
        Y[:, s] = yhat + dt * g
        Z[:, s] = z
        acc = acc + dt * g
        if not np.all(np.isfinite(Y[:, s])):
            raise RegressionError(f"non-finite backward value at step {s}")
    return BsdeSolution(Y, Z, grid, start, end, acc, driver.standard_error(acc))


def solve_bsde(spec: ProblemSpec, states: StatePaths, driver: BrownianDriver,
               basis: RegressionBasis, terminal=None, end: Optional[int] = None) -> BsdeSolution:
    """Solve ``dY = -f(s, X, Y, Z, u) ds + Z dW`` along ``states``.

    The terminal defaults to ``h(X_N)``; pass ``terminal`` (with ``end``) for
    a shorter horizon.
    """
    grid = states.grid
    end = grid.N if end is None else end
    if terminal is None:
        if end != grid.N:
            raise ConfigurationError("a terminal value is required when end < N")
        terminal = spec.h(states.X[:, grid.N], driver.W[:, grid.N])
    X, U, W = states.X, states.U, driver.W

    def gen(s, t, yhat, z):
        return spec.f(t, X[:, s], yhat, z, U[:, s], W[:, s])

    return backward_induction(terminal, gen, regressor_map(states, driver), grid, driver, basis,
                              start=states.start, end=end)


def cost_functional(spec: ProblemSpec, law: ControlLaw, x0, grid: TimeGrid, driver: BrownianDriver,
                    basis: RegressionBasis, t_index: int = 0):
    """``J(t, x0; u) = Y_t`` averaged over paths, with its standard error.

    All paths start from the same point, so ``Y_t`` is common at ``t = t0``;
    the cross-path mean only reduces regression noise.
    """
    states = restart_forward(spec, law, t_index, x0, grid, driver)
    sol = solve_bsde(spec, states, driver, basis)
    return sol.value, sol.se


@dataclass(frozen=True, eq=False)
class SemigroupResult:
    value: float
    se: float
    Y_t: np.ndarray
    states: StatePaths
    solution: BsdeSolution


def backward_semigroup(spec: ProblemSpec, law: ControlLaw, t_index: int, delta_steps: int, x, eta,
                       driver: BrownianDriver, basis: RegressionBasis) -> SemigroupResult:
    """``G_{t, t+delta}(eta)``: the BSDE on ``[t, t+delta]`` with terminal ``eta``.

    Forward paths restart at node ``t_index`` from ``x`` (shared state or per
    path).  ``eta`` is an array of per-path terminal values or a callable
    ``(X_{t+delta}, W_{t+delta}) -> (M,)``.
    """
    grid = driver.grid
    grid.check_index(t_index)
    if delta_steps < 0 or t_index + delta_steps > grid.N:
        raise ConfigurationError(f"t_index + delta_steps = {t_index + delta_steps} exceeds N = {grid.N}")
    end = t_index + delta_steps
    states = restart_forward(spec, law, t_index, x, grid, driver, end=end)
    term = eta(states.X[:, end], driver.W[:, end]) if callable(eta) else eta
    term = np.asarray(term, dtype=float)
    if term.shape != (driver.M,):
        raise ConfigurationError(f"terminal values must have shape ({driver.M},)")
    sol = solve_bsde(spec, states, driver, basis, terminal=term, end=end)
    return SemigroupResult(sol.value, sol.se, sol.Y[:, t_index], states, sol)


def solve_linear_bsde(terminal, alpha, beta, gamma, regressors: Callable, grid: TimeGrid,
                      driver: BrownianDriver, basis: RegressionBasis, start: int = 0,
                      end: Optional[int] = None) -> BsdeSolution:
    """Solve ``dY = -(alpha Y + beta Z + gamma) ds + Z dW``.

    Scalar case: ``terminal`` is ``(M,)`` and ``alpha, beta, gamma``
    broadcast to ``(M, N)``.  Vector case: ``terminal`` is ``(M, d)``, ``alpha``
    and ``beta`` broadcast to ``(M, N, d, d)`` (acting by matrix product) and
    ``gamma`` to ``(M, N, d)``.
    """
    terminal = np.asarray(terminal, dtype=float)
    M, N = terminal.shape[0], grid.N
    if terminal.ndim == 1:
        a = np.broadcast_to(np.asarray(alpha, dtype=float), (M, N))
        b = np.broadcast_to(np.asarray(beta, dtype=float), (M, N))
        c = np.broadcast_to(np.asarray(gamma, dtype=float), (M, N))

        def gen(s, t, y, z):
            return a[:, s] * y + b[:, s] * z + c[:, s]
    else:
        d = terminal.shape[1]
        a = np.broadcast_to(np.asarray(alpha, dtype=float), (M, N, d, d))
        b = np.broadcast_to(np.asarray(beta, dtype=float), (M, N, d, d))
        c = np.broadcast_to(np.asarray(gamma, dtype=float), (M, N, d))

        def gen(s, t, y, z):
            return (np.einsum("mij,mj->mi", a[:, s], y) + np.einsum("mij,mj->mi", b[:, s], z)
                    + c[:, s])

    return backward_induction(terminal, gen, regressors, grid, driver, basis, start=start, end=end)
