"""Euler-Maruyama simulation of the controlled state and its flow derivative."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import BrownianDriver, ControlLaw, ProblemSpec, TimeGrid
from .errors import ConfigurationError, SimulationBlowupError


@dataclass(frozen=True, eq=False)
class StatePaths:
    """Simulated states. Nodes before ``start`` are NaN."""

    X: np.ndarray  # (M, N+1, n)
    U: np.ndarray  # (M, N, k) controls actually applied; NaN before start
    grid: TimeGrid
    law: ControlLaw
    start: int = 0

    @property
    def M(self) -> int:
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[2]

    def frozen_law(self) -> ControlLaw:
        """The realized controls as an open-loop law on the same paths."""
        U = np.where(np.isnan(self.U), 0.0, self.U)
        return ControlLaw("open_loop", self.U.shape[2], open_loop=U, U=self.law.U,
                          label=f"frozen({self.law.label})")


@dataclass(frozen=True, eq=False)
class FlowPaths:
    dX: np.ndarray  # (M, N+1, n, n)
    grid: TimeGrid


def _as_start(x, M: int, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        x = np.broadcast_to(x.reshape(-1), (M, n)) if x.size in (1, n) else None
    if x is None or x.shape != (M, n):
        raise ConfigurationError(f"initial state must have {n} components (or shape ({M}, {n}))")
    return x


def _check_finite(arr, step, what):
    ok = np.isfinite(arr).reshape(arr.shape[0], -1).all(axis=1)
    if not ok.all():
        raise SimulationBlowupError(step, int(np.argmin(ok)), what)


def restart_forward(spec: ProblemSpec, law: ControlLaw, t_index: int, x, grid: TimeGrid,
                    driver: BrownianDriver, end: Optional[int] = None) -> StatePaths:
    """Simulate from node ``t_index`` with state ``x`` using increments from ``t_index`` on.

    ``x`` is a state vector shared by all paths or an ``(M, n)`` array of
    per-path starting values.  Simulation stops at node ``end`` (default N).
    """
    grid.check_index(t_index)
    end = grid.N if end is None else grid.check_index(end, "end")
    if end < t_index:
        raise ConfigurationError("end node precedes start node")
    if driver.grid.N != grid.N or driver.grid.dt != grid.dt:
        raise ConfigurationError("Brownian driver was sampled on a different grid")
    M, n, k = driver.M, spec.n, law.k
    X = np.full((M, grid.N + 1, n), np.nan)
    U = np.full((M, grid.N, k), np.nan)
    X[:, t_index] = _as_start(x, M, n)
    dt = grid.dt
    for s in range(t_index, end):
        t = grid.time(s)
        xs, ws = X[:, s], driver.W[:, s]
        u = law(s, t, xs, ws)
        U[:, s] = u
        X[:, s + 1] = xs + spec.b(t, xs, u, ws) * dt + spec.sigma(t, xs, u, ws) * driver.increments[:, s, None]
        _check_finite(X[:, s + 1], s, "state")
    if end < grid.N:
        X[:, end + 1:] = np.nan
    return StatePaths(X, U, grid, law, t_index)


def simulate_forward(spec: ProblemSpec, law: ControlLaw, x0, grid: TimeGrid,
                     driver: BrownianDriver) -> StatePaths:
    """``X_{k+1} = X_k + b dt + sigma dW_k`` along every driver path."""
    return restart_forward(spec, law, 0, x0, grid, driver)


def simulate_flow(spec: ProblemSpec, law: ControlLaw, states: StatePaths,
                  driver: BrownianDriver) -> FlowPaths:
    """Jacobian of the state with respect to its initial value.

    Integrates ``d(dX) = b_x dX ds + sigma_x dX dW`` with ``dX_start = I`` along
    the same paths and controls as ``states``.
    """
    grid = states.grid
    M, n = states.M, states.n
    dX = np.full((M, grid.N + 1, n, n), np.nan)
    dX[:, states.start] = np.eye(n)
    dt = grid.dt
    for s in range(states.start, grid.N):
        if np.isnan(states.U[0, s, 0]):
            break
        t = grid.time(s)
        xs, us, ws = states.X[:, s], states.U[:, s], driver.W[:, s]
        bx = spec.partial("b_x", t, xs, us, ws)
        sx = spec.partial("sigma_x", t, xs, us, ws)
        J = dX[:, s]
        dX[:, s + 1] = J + (bx @ J) * dt + (sx @ J) * driver.increments[:, s, None, None]
        _check_finite(dX[:, s + 1], s, "flow derivative")
    return FlowPaths(dX, grid)


def dump_paths_csv(states: StatePaths, path, max_paths: Optional[int] = None) -> None:
    """Write ``(path, node, x_0..x_{n-1})`` rows."""
    M = states.M if max_paths is None else min(max_paths, states.M)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "node"] + [f"x{i}" for i in range(states.n)])
        for m in range(M):
            for s in range(states.start, states.grid.N + 1):
                if np.isnan(states.X[m, s, 0]):
                    break
                wr.writerow([m, s] + [repr(float(v)) for v in states.X[m, s]])
