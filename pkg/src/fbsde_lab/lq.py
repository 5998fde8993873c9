"""Linear-quadratic recursive control with random coefficients.

The system::

    dX = (A X + B u) ds + (C X + D u) dW
    dY = -(lam Y + <Q X, X> + <R u, u>) ds + Z dW,     Y_T = <G X_T, X_T>

has value ``<P X, X>`` where ``(P, L)`` solves the stochastic Riccati BSDE
``dP = -F(P, L) ds + L dW`` with ``P_T = G`` and::

    S = P B + C* P D + L D,   K = R + D* P D
    F = A* P + P A + C* P C + lam P + C* L + L C + Q - S K^{-1} S*

The optimal feedback is ``u = -K^{-1} S* x``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .bsde import Projector, RegressionBasis, regressor_map, solve_linear_bsde
from .core import (BrownianDriver, CoefficientField, ControlLaw, ControlSet, ProblemSpec,
                   TimeGrid)
from .errors import ConfigurationError, NearSingularGainError, PositivityLossError
from .hamilton import AdjointTriple, ResidualSummary, relative, residual_summary, rms
from .sde import StatePaths

FIELDS = ("A", "B", "C", "D", "lam", "Q", "R", "G")

DEFAULT_COND_CAP = 1e10


def _T(a):
    return np.swapaxes(a, -1, -2)


def _sym(a):
    return 0.5 * (a + _T(a))


@dataclass(frozen=True, eq=False)
class LqCoefficients:
    """Coefficient fields of the LQ problem; ``G`` is the terminal weight."""

    A: CoefficientField
    B: CoefficientField
    C: CoefficientField
    D: CoefficientField
    lam: CoefficientField
    Q: CoefficientField
    R: CoefficientField
    G: CoefficientField
    n: int = 1
    k: int = 1
    margin: float = 1e-10

    def __post_init__(self):
        n, k = self.n, self.k
        shapes = {"A": (n, n), "B": (n, k), "C": (n, n), "D": (n, k), "lam": (),
                  "Q": (n, n), "R": (k, k), "G": (n, n)}
        bad = [name for name, shp in shapes.items() if tuple(getattr(self, name).shape) != shp]
        if bad:
            raise ConfigurationError(f"coefficient shapes do not match n={n}, k={k}: {bad}")
        unbounded = [name for name in FIELDS if getattr(self, name).growth_tag != "bounded"]
        if unbounded:
            raise ConfigurationError(f"LQ coefficients must be bounded: {unbounded}")

    @classmethod
    def from_values(cls, n: int = 1, k: int = 1, margin: float = 1e-10, **values) -> "LqCoefficients":
        """Build from numbers, factor expressions in ``(t, w)`` or nested lists.

        Missing fields default to zero, except ``R`` (identity).  For ``n = k = 1``
        plain scalars are accepted for the matrix fields.
        """
        unknown = set(values) - set(FIELDS)
        if unknown:
            raise ConfigurationError(f"unknown LQ coefficients {sorted(unknown)}")
        shapes = {"A": (n, n), "B": (n, k), "C": (n, n), "D": (n, k), "lam": (),
                  "Q": (n, n), "R": (k, k), "G": (n, n)}
        fields = {}
        for name, shp in shapes.items():
            default = np.eye(k).tolist() if name == "R" else np.zeros(shp).tolist()
            v = values.get(name, default)
            arr = np.array(v, dtype=object)
            if arr.shape != shp:
                if arr.size == int(np.prod(shp)):
                    arr = arr.reshape(shp)
                else:
                    raise ConfigurationError(f"coefficient {name} has shape {arr.shape}, expected {shp}")
            fields[name] = CoefficientField.factor(arr.tolist() if shp else arr.item(), label=name)
        return cls(n=n, k=k, margin=margin, **fields)

    @property
    def random(self) -> bool:
        return any(getattr(self, name).random for name in FIELDS)

    def at(self, t: float, w: np.ndarray) -> dict:
        """All coefficients at ``(t, w)``, each with a leading path axis."""
        w = np.asarray(w, dtype=float)
        M = w.shape[0]
        return {name: np.asarray(getattr(self, name)(t, None, w, M)) for name in FIELDS}

    def deterministic_at(self, t: float) -> dict:
        return {name: np.asarray(getattr(self, name)(t, None, None)) for name in FIELDS}

    def check_positivity(self, ts, ws) -> None:
        """Smallest eigenvalues of ``Q`` and ``R`` at the probed inputs must exceed the margin."""
        ws = np.asarray(ws, dtype=float)
        for t in ts:
            c = self.at(t, ws)
            for name in ("Q", "R"):
                lo = float(np.min(np.linalg.eigvalsh(_sym(c[name]))))
                if lo < self.margin:
                    raise ConfigurationError(
                        f"{name} not uniformly positive definite: eigenvalue {lo:.3g} at t={t}")

    def to_problem_spec(self, T: float) -> ProblemSpec:
        """The LQ data as a general problem with analytic partial derivatives."""
        n, k = self.n, self.k

        def b(t, x, u, w):
            c = self.at(t, w)
            return np.einsum("mij,mj->mi", c["A"], x) + np.einsum("mij,mj->mi", c["B"], u)

        def sigma(t, x, u, w):
            c = self.at(t, w)
            return np.einsum("mij,mj->mi", c["C"], x) + np.einsum("mij,mj->mi", c["D"], u)

        def f(t, x, y, z, u, w):
            c = self.at(t, w)
            return (c["lam"] * y + np.einsum("mi,mij,mj->m", x, c["Q"], x)
                    + np.einsum("mi,mij,mj->m", u, c["R"], u))

        def h(x, w):
            return np.einsum("mi,mij,mj->m", x, self.at(T, w)["G"], x)

        partials = {
            "b_x": lambda t, x, u, w: self.at(t, w)["A"],
            "b_u": lambda t, x, u, w: self.at(t, w)["B"],
            "sigma_x": lambda t, x, u, w: self.at(t, w)["C"],
            "sigma_u": lambda t, x, u, w: self.at(t, w)["D"],
            "f_x": lambda t, x, y, z, u, w: 2 * np.einsum("mij,mj->mi", _sym(self.at(t, w)["Q"]), x),
            "f_y": lambda t, x, y, z, u, w: self.at(t, w)["lam"],
            "f_z": lambda t, x, y, z, u, w: np.zeros(x.shape[0]),
            "f_u": lambda t, x, y, z, u, w: 2 * np.einsum("mij,mj->mi", _sym(self.at(t, w)["R"]), u),
            "h_x": lambda x, w: 2 * np.einsum("mij,mj->mi", _sym(self.at(T, w)["G"]), x),
        }
        return ProblemSpec(b, sigma, f, h, n=n, k=k, partials=partials, label="lq")


def gain_terms(P, L, c, cond_cap: float = DEFAULT_COND_CAP):
    """``(S, K)`` with a conditioning check on ``K``.

    ``P, L`` are ``(..., n, n)``; ``c`` holds coefficients broadcastable to them.
    """
    B, C, D, R = c["B"], c["C"], c["D"], c["R"]
    S = P @ B + _T(C) @ P @ D + L @ D
    K = R + _T(D) @ P @ D
    cond = np.linalg.cond(K)
    if not np.all(np.isfinite(cond)) or np.max(cond) > cond_cap:
        raise NearSingularGainError(f"R + D*PD condition number {np.max(cond):.3g} exceeds cap {cond_cap:.3g}")
    return S, K


def riccati_generator(P, L, c, cond_cap: float = DEFAULT_COND_CAP):
    """``F(P, L)``; the Riccati BSDE reads ``dP = -F ds + L dW``."""
    A, C, lam, Q = c["A"], c["C"], c["lam"], c["Q"]
    S, K = gain_terms(P, L, c, cond_cap)
    lam = np.asarray(lam)[..., None, None]
    return (_T(A) @ P + P @ A + _T(C) @ P @ C + lam * P + _T(C) @ L + L @ C + Q
            - S @ np.linalg.solve(K, _T(S)))


def feedback_gain(P, L, c, cond_cap: float = DEFAULT_COND_CAP):
    """``-K^{-1} S*``, shape ``(..., k, n)``."""
    S, K = gain_terms(P, L, c, cond_cap)
    return -np.linalg.solve(K, _T(S))


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """``P`` and ``L`` per node; in LSMC mode per path as well.

    Deterministic mode: ``P, L`` are ``(N+1, n, n)``.  LSMC mode: ``(M, N+1, n, n)``
    plus fitted maps in the factor basis, so the solution can be evaluated at
    any Brownian level.  ``L`` at node N repeats node N-1.
    """

    mode: str
    grid: TimeGrid
    P: np.ndarray
    L: np.ndarray
    basis: Optional[RegressionBasis] = None
    P_maps: Optional[list] = None
    L_maps: Optional[list] = None
    clip: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n(self) -> int:
        return self.P.shape[-1]

    @property
    def max_clip(self) -> float:
        return float(np.max(self.clip)) if self.clip.size else 0.0

    def _eval(self, arr, maps, step, w):
        w = np.asarray(w, dtype=float)
        if self.mode == "deterministic_ode":
            return np.broadcast_to(arr[step], (w.shape[0], self.n, self.n))
        return _sym(maps[step](self.basis.design({"w": w})))

    def P_at(self, step: int, w) -> np.ndarray:
        return self._eval(self.P, self.P_maps, step, w)

    def L_at(self, step: int, w) -> np.ndarray:
        return self._eval(self.L, self.L_maps, step, w)

    def P0(self) -> np.ndarray:
        """``P`` at the initial node (mean over paths in LSMC mode)."""
        return self.P[0] if self.mode == "deterministic_ode" else self.P[:, 0].mean(axis=0)


def solve_riccati_ode(coeffs: LqCoefficients, grid: TimeGrid,
                      cond_cap: float = DEFAULT_COND_CAP) -> RiccatiSolution:
    """Backward RK4 for the Riccati ODE, symmetrized every step."""
    if coeffs.random:
        raise ConfigurationError("ODE mode needs coefficients independent of the Brownian level")
    N, dt, n = grid.N, grid.dt, coeffs.n
    P = np.empty((N + 1, n, n))
    P[N] = _sym(coeffs.deterministic_at(grid.T)["G"])
    zero = np.zeros((n, n))

    def F(t, p):
        return riccati_generator(p, zero, coeffs.deterministic_at(t), cond_cap)

    for s in range(N, 0, -1):
        t = grid.time(s)
        p = P[s]
        k1 = F(t, p)
        k2 = F(t - dt / 2, p + dt / 2 * k1)
        k3 = F(t - dt / 2, p + dt / 2 * k2)
        k4 = F(t - dt, p + dt * k3)
        P[s - 1] = _sym(p + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
        lo = float(np.min(np.linalg.eigvalsh(P[s - 1])))
        if lo < -1e-8:
            raise PositivityLossError(f"Riccati solution lost positivity at step {s - 1}: eigenvalue {lo:.3g}")
    return RiccatiSolution("deterministic_ode", grid, P, np.zeros_like(P))


def _clip_psd(P):
    vals, vecs = np.linalg.eigh(P)
    neg = np.maximum(-vals, 0.0).max(axis=-1)
    vals = np.maximum(vals, 0.0)
    return (vecs * vals[..., None, :]) @ _T(vecs), neg


def solve_riccati_lsmc(coeffs: LqCoefficients, grid: TimeGrid, driver: BrownianDriver,
                       basis: Optional[RegressionBasis] = None, strict: bool = False,
                       clip_tol: float = 1e-4, cond_cap: float = DEFAULT_COND_CAP) -> RiccatiSolution:
    """Entrywise LSMC for the Riccati BSDE along the Brownian factor paths.

    Each step regresses ``P_{k+1}`` on polynomial features of ``W_k``, takes
    ``L_k`` from the increment projection, applies the explicit drift, and then
    symmetrizes and clips negative eigenvalues.  Clips larger than ``clip_tol``
    warn, or raise with ``strict``.
    """
    basis = basis or RegressionBasis(2, ("w",))
    if set(basis.variables) - {"w"}:
        raise ConfigurationError("the Riccati regression basis may only use the Brownian level 'w'")
    M, N, n, dt = driver.M, grid.N, coeffs.n, grid.dt
    P = np.empty((M, N + 1, n, n))
    L = np.zeros((M, N + 1, n, n))
    P[:, N] = _sym(coeffs.at(grid.T, driver.W[:, N])["G"])
    P_maps: list = [None] * (N + 1)
    L_maps: list = [None] * (N + 1)
    clip = np.zeros(N)
    for s in range(N - 1, -1, -1):
        t = grid.time(s)
        w = driver.W[:, s]
        proj = Projector(basis.design({"w": w}), basis.ridge)
        nxt = P[:, s + 1]
        phat = _sym(proj(nxt))
        lk = _sym(proj((nxt - phat) * driver.increments[:, s, None, None] / dt))
        ps = _sym(phat + dt * riccati_generator(phat, lk, coeffs.at(t, w), cond_cap))
        ps, neg = _clip_psd(ps)
        clip[s] = float(np.max(neg))
        P[:, s] = ps
        L[:, s] = lk
        P_maps[s] = proj.fit(ps)
        L_maps[s] = proj.fit(lk)
    L[:, N] = L[:, N - 1]
    L_maps[N] = L_maps[N - 1]
    P_maps[N] = Projector(basis.design({"w": driver.W[:, N]}), basis.ridge).fit(P[:, N])
    worst = float(clip.max())
    if worst > clip_tol:
        msg = f"Riccati LSMC clipped eigenvalues by up to {worst:.3g} (tolerance {clip_tol:.3g})"
        if strict:
            raise PositivityLossError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return RiccatiSolution("random_lsmc", grid, P, L, basis, P_maps, L_maps, clip)


def solve_riccati(coeffs: LqCoefficients, grid: TimeGrid, driver: Optional[BrownianDriver] = None,
                  basis: Optional[RegressionBasis] = None, **kw) -> RiccatiSolution:
    """ODE mode for deterministic coefficients, LSMC mode otherwise."""
    if not coeffs.random:
        return solve_riccati_ode(coeffs, grid, cond_cap=kw.get("cond_cap", DEFAULT_COND_CAP))
    if driver is None:
        raise ConfigurationError("random coefficients need a Brownian driver")
    return solve_riccati_lsmc(coeffs, grid, driver, basis, **kw)


def feedback_control(riccati: RiccatiSolution, coeffs: LqCoefficients,
                     cond_cap: float = DEFAULT_COND_CAP) -> ControlLaw:
    """``u = -(R + D*PD)^{-1} (PB + C*PD + LD)* x`` with ``P, L`` at ``(step, w)``."""

    def fb(step, t, x, w):
        gain = feedback_gain(riccati.P_at(step, w), riccati.L_at(step, w), coeffs.at(t, w), cond_cap)
        return np.einsum("mij,mj->mi", gain, x)

    return ControlLaw("feedback", coeffs.k, feedback=fb, U=ControlSet(coeffs.k), label="riccati-feedback")


def lq_value(riccati: RiccatiSolution, t_index: int, x, w):
    """``(<P x, x>, <L x, x>)`` at node ``t_index`` for each row of ``x``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    x = np.asarray(x, dtype=float)
    x = np.broadcast_to(x.reshape(-1, riccati.n) if x.ndim < 2 else x, (w.shape[0], riccati.n))
    P = riccati.P_at(t_index, w)
    L = riccati.L_at(t_index, w)
    return np.einsum("mi,mij,mj->m", x, P, x), np.einsum("mi,mij,mj->m", x, L, x)


def solve_k_lq(coeffs: LqCoefficients, grid: TimeGrid, driver: BrownianDriver) -> np.ndarray:
    """``k_t = -exp(sum_{s_j < t} lam(s_j, W_j) dt)``, shape ``(M, N+1)``."""
    M, N = driver.M, grid.N
    lam = np.stack([np.asarray(coeffs.lam(grid.time(s), None, driver.W[:, s], M)) for s in range(N)], axis=1)
    acc = np.zeros((M, N + 1))
    np.cumsum(lam * grid.dt, axis=1, out=acc[:, 1:])
    return -np.exp(acc)


def solve_lq_adjoint(coeffs: LqCoefficients, states: StatePaths, k: np.ndarray,
                     driver: BrownianDriver, basis: RegressionBasis) -> AdjointTriple:
    """Adjoint ``(p, q)`` of the LQ problem.

    Solved for ``phat = p / k``, which satisfies
    ``dphat = -[(A* + lam) phat + C* qhat - 2 Q X] ds + qhat dW`` with
    ``phat_T = -2 G X_T``; then ``p = k phat`` and ``q = k qhat``.
    """
    grid = states.grid
    M, N, n = states.M, grid.N, states.n
    alpha = np.zeros((M, N, n, n))
    beta = np.zeros((M, N, n, n))
    gamma = np.zeros((M, N, n))
    eye = np.eye(n)
    for s in range(states.start, N):
        c = coeffs.at(grid.time(s), driver.W[:, s])
        alpha[:, s] = _T(c["A"]) + c["lam"][:, None, None] * eye
        beta[:, s] = _T(c["C"])
        gamma[:, s] = -2 * np.einsum("mij,mj->mi", _sym(c["Q"]), states.X[:, s])
    G = _sym(coeffs.at(grid.T, driver.W[:, N])["G"])
    terminal = -2 * np.einsum("mij,mj->mi", G, states.X[:, N])
    sol = solve_linear_bsde(terminal, alpha, beta, gamma, regressor_map(states, driver), grid,
                            driver, basis, start=states.start)
    return AdjointTriple(k[:, :, None] * sol.Y, k[:, :N, None] * sol.Z, k, sol)


def stationarity_residual(coeffs: LqCoefficients, states: StatePaths,
                          adjoint: AdjointTriple, driver: BrownianDriver) -> ResidualSummary:
    """``-2 k R u + D* q + B* p`` along the paths, relative to ``RMS(2 k R u)``."""
    grid = states.grid
    res, ref = [], []
    for s in range(states.start, grid.N):
        c = coeffs.at(grid.time(s), driver.W[:, s])
        kRu = adjoint.k[:, s, None] * np.einsum("mij,mj->mi", _sym(c["R"]), states.U[:, s])
        r = (-2 * kRu + np.einsum("mji,mj->mi", c["D"], adjoint.q[:, s])
             + np.einsum("mji,mj->mi", c["B"], adjoint.p[:, s]))
        res.append(r)
        ref.append(2 * kRu)
    r = np.stack(res, axis=1)
    scale = rms(np.stack(ref, axis=1))
    a = rms(r)
    return ResidualSummary("stationarity", r, a, relative(a, scale, 1e-12 * (1 + scale)))


def mp_dpp_residual_lq(riccati: RiccatiSolution, coeffs: LqCoefficients, states: StatePaths,
                       adjoint: AdjointTriple, driver: BrownianDriver):
    """Residuals of ``p = -2 P X k`` and ``q = -2 [P (C X + D u) + L X] k``.

    Returns ``(p_summary, q_summary)``; relative values are against RMS(p) and RMS(q).
    """
    grid = states.grid
    rp, rq, ps, qs = [], [], [], []
    for s in range(states.start, grid.N):
        w = driver.W[:, s]
        c = coeffs.at(grid.time(s), w)
        P, L = riccati.P_at(s, w), riccati.L_at(s, w)
        X, u, k = states.X[:, s], states.U[:, s], adjoint.k[:, s, None]
        vol = np.einsum("mij,mj->mi", c["C"], X) + np.einsum("mij,mj->mi", c["D"], u)
        ref_p = -2 * np.einsum("mij,mj->mi", P, X) * k
        ref_q = -2 * (np.einsum("mij,mj->mi", P, vol) + np.einsum("mij,mj->mi", L, X)) * k
        rp.append(adjoint.p[:, s] - ref_p)
        rq.append(adjoint.q[:, s] - ref_q)
        ps.append(adjoint.p[:, s])
        qs.append(adjoint.q[:, s])
    stack = lambda a: np.stack(a, axis=1)  # noqa: E731
    return (residual_summary("p", stack(rp), stack(ps)), residual_summary("q", stack(rq), stack(qs)))


def hjb_minimizer(P, L, c, x, cond_cap: float = DEFAULT_COND_CAP):
    """Minimizer and minimum over ``u`` of the LQ generalized Hamiltonian.

    With ``V = <P x, x>`` and ``Psi = <L x, x>`` the u-dependent part is
    ``<(R + D* P D) u, u> + 2 <(B* P + D* P C + D* L) x, u>``, minimized at
    ``u = -(R + D* P D)^{-1} (B* P + D* P C + D* L) x`` with infimum
    ``<F(P, L) x, x>``.  All arrays carry a leading path axis.
    """
    B, C, D, R = c["B"], c["C"], c["D"], c["R"]
    K = R + _T(D) @ P @ D
    lin = np.einsum("mij,mj->mi", _T(B) @ P + _T(D) @ P @ C + _T(D) @ L, x)
    u = -np.linalg.solve(K, lin[..., None])[..., 0]
    value = np.einsum("mi,mij,mj->m", x, riccati_generator(P, L, c, cond_cap), x)
    return u, value


def lyapunov_closed_form(A: float, lam: float, Q: float, G: float, T: float, t):
    """Scalar ``P`` when ``B = C = D = 0``: ``e^{a(T-t)} G + Q (e^{a(T-t)} - 1)/a``, ``a = 2A + lam``."""
    a = 2 * A + lam
    tau = T - np.asarray(t, dtype=float)
    integral = tau if a == 0 else np.expm1(a * tau) / a
    return np.exp(a * tau) * G + Q * integral


__all__ = [
    "FIELDS", "LqCoefficients", "RiccatiSolution", "feedback_control",
    "feedback_gain", "gain_terms", "hjb_minimizer", "lq_value", "lyapunov_closed_form",
    "mp_dpp_residual_lq", "riccati_generator", "solve_k_lq", "solve_lq_adjoint", "solve_riccati",
    "solve_riccati_lsmc", "solve_riccati_ode", "stationarity_residual",
]
