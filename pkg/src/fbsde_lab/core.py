"""Time grids, Brownian drivers, random coefficients, control laws and problem data.

Array conventions used throughout the package (M paths, N steps):

* states ``x``: ``(M, n)``; controls ``u``: ``(M, k)``; Brownian level ``w``: ``(M,)``
* scalar backward values ``y``, ``z``: ``(M,)``
* path arrays carry the node axis second, e.g. ``X`` is ``(M, N+1, n)``.

Random coefficients are deterministic functions of ``(t, x, w)`` where ``w``
is the current level of the driving Brownian motion, so ``(X_t, W_t)`` is a
Markov state and conditional expectations can be regressed on it.
"""

from __future__ import annotations

import ast
import math
import operator
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError

# ---------------------------------------------------------------------------
# time grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    N: int

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.N

    @property
    def nodes(self) -> np.ndarray:
        # t0 + k*dt rather than linspace so that nodes[k+1] - nodes[k] is uniform
        nodes = self.t0 + self.dt * np.arange(self.N + 1)
        nodes[-1] = self.T
        return nodes

    def time(self, k: int) -> float:
        return self.T if k == self.N else self.t0 + k * self.dt

    def check_index(self, k: int, name: str = "t_index") -> int:
        if not 0 <= k <= self.N:
            raise ConfigurationError(f"{name}={k} outside [0, {self.N}]")
        return int(k)


def build_grid(t0: float, T: float, N: int) -> TimeGrid:
    """Uniform grid ``t0 = s_0 < ... < s_N = T``."""
    if not (math.isfinite(t0) and math.isfinite(T)) or T <= t0:
        raise ConfigurationError(f"horizon must satisfy T > t0, got t0={t0}, T={T}")
    if int(N) != N or N < 1:
        raise ConfigurationError(f"step count N must be a positive integer, got {N}")
    return TimeGrid(float(t0), float(T), int(N))


# ---------------------------------------------------------------------------
# Brownian driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BrownianDriver:
    grid: TimeGrid
    M: int
    seed: int
    antithetic: bool
    increments: np.ndarray  # (M, N)
    W: np.ndarray  # (M, N+1)

    def prefix(self, k: int) -> np.ndarray:
        """Read-only view of ``W`` at nodes ``0..k``; uses increments ``< k`` only."""
        view = self.W[:, : k + 1]
        view.flags.writeable = False
        return view

    def standard_error(self, values) -> float:
        return mc_standard_error(values, self.antithetic)


def _path_normals(seed: int, stream: int, size: int) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(stream,))
    return np.random.default_rng(ss).standard_normal(size)


def sample_brownian(grid: TimeGrid, M: int, seed: int, antithetic: bool = True) -> BrownianDriver:
    """Brownian increments on ``grid`` for ``M`` paths.

    Each path (or antithetic pair) draws from its own stream derived from
    ``(seed, index)``, so a path's increments do not depend on ``M``.  For even
    ``M`` with ``antithetic`` set, path ``2j+1`` is the negation of path ``2j``.
    """
    if int(M) != M or M < 1:
        raise ConfigurationError(f"path count M must be a positive integer, got {M}")
    M = int(M)
    N = grid.N
    sqdt = math.sqrt(grid.dt)
    pair = antithetic and M % 2 == 0
    dW = np.empty((M, N))
    if pair:
        for j in range(M // 2):
            z = _path_normals(seed, j, N) * sqdt
            dW[2 * j] = z
            dW[2 * j + 1] = -z
    else:
        for m in range(M):
            dW[m] = _path_normals(seed, m, N) * sqdt
    W = np.zeros((M, N + 1))
    np.cumsum(dW, axis=1, out=W[:, 1:])
    # exact increment identity W[k+1] - W[k] == dW[k]: rebuild dW from W
    dW = np.diff(W, axis=1)
    dW.flags.writeable = False
    W.flags.writeable = False
    return BrownianDriver(grid, M, int(seed), pair, dW, W)


def mc_standard_error(values, antithetic: bool = False) -> float:
    """Standard error of the sample mean; antithetic pairs are averaged first."""
    v = np.asarray(values, dtype=float).reshape(len(values), -1).mean(axis=1)
    if antithetic and len(v) % 2 == 0 and len(v) >= 4:
        v = 0.5 * (v[0::2] + v[1::2])
    if len(v) < 2:
        return 0.0
    return float(np.std(v, ddof=1) / math.sqrt(len(v)))


# ---------------------------------------------------------------------------
# random coefficients
# ---------------------------------------------------------------------------

_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "tanh": np.tanh,
    "abs": np.abs,
    "sqrt": np.sqrt,
    "arctan": np.arctan,
}
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}
_NAMES = ("t", "w")


def compile_factor(expr: str) -> Callable:
    """Compile a whitelisted expression in ``t`` and ``w`` (e.g. ``"a0 + a1*sin(w)"``
    with numbers substituted) into a vectorized ``(t, w) -> value`` function."""
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigurationError(f"cannot parse factor expression {expr!r}") from exc

    def check(node):
        if isinstance(node, ast.Expression):
            return check(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return
        if isinstance(node, ast.Name):
            if node.id not in _NAMES and node.id not in ("pi",):
                raise ConfigurationError(f"unknown name {node.id!r} in {expr!r}")
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            check(node.left)
            check(node.right)
            return
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            check(node.operand)
            return
        if (
            isinstance(node, ast.Call)
            and isinstance(node.func, ast.Name)
            and node.func.id in _FUNCS
            and len(node.args) == 1
            and not node.keywords
        ):
            check(node.args[0])
            return
        raise ConfigurationError(f"disallowed construct in factor expression {expr!r}")

    check(tree)

    def ev(node, env):
        if isinstance(node, ast.Expression):
            return ev(node.body, env)
        if isinstance(node, ast.Constant):
            return float(node.value)
        if isinstance(node, ast.Name):
            return math.pi if node.id == "pi" else env[node.id]
        if isinstance(node, ast.BinOp):
            return _BINOPS[type(node.op)](ev(node.left, env), ev(node.right, env))
        if isinstance(node, ast.UnaryOp):
            return _UNOPS[type(node.op)](ev(node.operand, env))
        return _FUNCS[node.func.id](ev(node.args[0], env))

    def fn(t, w):
        return ev(tree, {"t": t, "w": w})

    fn.expr = expr
    fn.uses_w = any(isinstance(n, ast.Name) and n.id == "w" for n in ast.walk(tree))
    fn.uses_t = any(isinstance(n, ast.Name) and n.id == "t" for n in ast.walk(tree))
    return fn


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """Adapted random coefficient realized as a pure function of ``(t, x, w)``.

    ``evaluator(t, x, w)`` may return an array of the declared ``shape`` (constant
    across paths) or one with a leading path axis.
    """

    evaluator: Callable
    shape: tuple = ()
    growth_tag: str = "bounded"
    bound: Optional[float] = None
    random: bool = True
    label: str = ""

    def __post_init__(self):
        if self.growth_tag not in ("bounded", "linear", "quadratic"):
            raise ConfigurationError(f"unknown growth tag {self.growth_tag!r}")

    def __call__(self, t, x=None, w=None, M: Optional[int] = None) -> np.ndarray:
        val = np.asarray(self.evaluator(t, x, w), dtype=float)
        if M is not None:
            val = np.broadcast_to(val, (M,) + tuple(self.shape))
        return val

    @classmethod
    def constant(cls, value, label: str = "") -> "CoefficientField":
        arr = np.array(value, dtype=float)
        arr.flags.writeable = False
        return cls(
            lambda t, x, w: arr,
            shape=arr.shape,
            growth_tag="bounded",
            bound=float(np.max(np.abs(arr))) if arr.size else 0.0,
            random=False,
            label=label or repr(value),
        )

    @classmethod
    def factor(cls, spec, bound: Optional[float] = None, label: str = "") -> "CoefficientField":
        """Coefficient from a number, an expression string, or nested lists of them."""
        arr = np.array(spec, dtype=object)
        if all(isinstance(e, (int, float, np.floating, np.integer)) for e in arr.flat):
            return cls.constant(np.array(spec, dtype=float), label=label)
        entries = []
        uses_w = False
        for e in arr.flat:
            if isinstance(e, str):
                fn = compile_factor(e)
                uses_w = uses_w or fn.uses_w or fn.uses_t
                entries.append(fn)
            else:
                c = float(e)
                entries.append(lambda t, w, c=c: c)
        shape = arr.shape

        def evaluator(t, x, w):
            wa = np.zeros(1) if w is None else np.asarray(w, dtype=float)
            vals = [np.broadcast_to(np.asarray(fn(t, wa), dtype=float), wa.shape) for fn in entries]
            out = np.stack(vals, axis=-1).reshape(wa.shape + shape)
            return out[0] if w is None else out

        return cls(evaluator, shape=shape, growth_tag="bounded", bound=bound, random=uses_w,
                   label=label or repr(spec))

    def check_bound(self, ts, ws, x=None) -> bool:
        """True if the declared bound holds on the probed inputs."""
        if self.growth_tag != "bounded" or self.bound is None:
            return True
        ws = np.asarray(ws, dtype=float)
        return all(np.all(np.abs(self(t, x, ws)) <= self.bound + 1e-12) for t in ts)


# ---------------------------------------------------------------------------
# controls
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Box ``lower <= u <= upper`` (componentwise, infinite bounds allowed)."""

    k: int = 1
    lower: float | np.ndarray = -np.inf
    upper: float | np.ndarray = np.inf

    def contains(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.all((u >= self.lower) & (u <= self.upper), axis=-1)

    def project(self, u) -> np.ndarray:
        return np.clip(u, self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class ControlLaw:
    """Admissible control as an open-loop ``(M, N, k)`` array or a feedback map.

    Feedback maps have signature ``(step, t, x, w) -> (M, k)``; ``step`` is the
    grid index of ``t``.
    """

    kind: str
    k: int = 1
    open_loop: Optional[np.ndarray] = None
    feedback: Optional[Callable] = None
    U: ControlSet = field(default_factory=ControlSet)
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("open_loop", "feedback"):
            raise ConfigurationError(f"unknown control kind {self.kind!r}")
        if self.kind == "open_loop" and (self.open_loop is None or self.open_loop.ndim != 3):
            raise ConfigurationError("open-loop control needs an (M, N, k) array")
        if self.kind == "feedback" and self.feedback is None:
            raise ConfigurationError("feedback control needs a callable")

    def __call__(self, step: int, t: float, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        if self.kind == "open_loop":
            u = self.open_loop[:, step]
        else:
            u = np.asarray(self.feedback(step, t, x, w), dtype=float)
            u = np.broadcast_to(u, (x.shape[0], self.k)) if u.ndim < 2 else u
        if not np.all(self.U.contains(u)):
            bad = int(np.argmin(self.U.contains(u)))
            raise ConfigurationError(f"control outside U at step {step}, path {bad}")
        return u


def constant_control(value, k: int = 1, U: Optional[ControlSet] = None) -> ControlLaw:
    val = np.broadcast_to(np.asarray(value, dtype=float), (k,)).copy()
    return ControlLaw("feedback", k, feedback=lambda s, t, x, w: np.broadcast_to(val, (x.shape[0], k)),
                      U=U or ControlSet(k), label=f"const{val.tolist()}")


def linear_feedback(gain, k: int = 1, U: Optional[ControlSet] = None) -> ControlLaw:
    """``u = gain @ x`` with a constant ``(k, n)`` gain (or scalar)."""
    g = np.atleast_2d(np.asarray(gain, dtype=float))
    return ControlLaw("feedback", k, feedback=lambda s, t, x, w: x @ g.T,
                      U=U or ControlSet(k), label=f"linear{g.tolist()}")


def adapted_open_loop(driver: BrownianDriver, fn: Callable, k: int = 1,
                      U: Optional[ControlSet] = None) -> ControlLaw:
    """Open-loop control built from Brownian path prefixes.

    ``fn(step, t, W_prefix)`` receives only ``W`` at nodes ``0..step`` and must
    return ``(M, k)`` (or ``(M,)`` when ``k == 1``).
    """
    grid = driver.grid
    out = np.empty((driver.M, grid.N, k))
    for s in range(grid.N):
        val = np.asarray(fn(s, grid.time(s), driver.prefix(s)), dtype=float)
        out[:, s] = val.reshape(driver.M, k) if val.ndim < 2 else val
    return ControlLaw("open_loop", k, open_loop=out, U=U or ControlSet(k), label="adapted")


def shifted(law: ControlLaw, delta) -> ControlLaw:
    """``u + delta`` for a constant shift."""
    d = np.broadcast_to(np.asarray(delta, dtype=float), (law.k,))
    if law.kind == "open_loop":
        return ControlLaw("open_loop", law.k, open_loop=law.open_loop + d, U=law.U,
                          label=f"{law.label}+{d.tolist()}")
    return ControlLaw("feedback", law.k, feedback=lambda s, t, x, w: law(s, t, x, w) + d,
                      U=law.U, label=f"{law.label}+{d.tolist()}")


# ---------------------------------------------------------------------------
# problem data
# ---------------------------------------------------------------------------

PARTIALS = ("b_x", "b_u", "sigma_x", "sigma_u", "f_x", "f_y", "f_z", "f_u", "h_x")


def _fd_step(v):
    return 1e-6 * (1.0 + np.abs(v))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Coefficients ``(b, sigma, f, h)`` of the controlled forward-backward system.

    Signatures (vectorized over paths)::

        b(t, x, u, w), sigma(t, x, u, w) -> (M, n)
        f(t, x, y, z, u, w)              -> (M,)
        h(x, w)                          -> (M,)

    ``partials`` may supply any of ``PARTIALS``; missing ones fall back to
    central finite differences unless ``finite_differences`` is False.
    """

    b: Callable
    sigma: Callable
    f: Callable
    h: Callable
    n: int = 1
    k: int = 1
    partials: dict = field(default_factory=dict)
    finite_differences: bool = True
    label: str = ""

    def __post_init__(self):
        unknown = set(self.partials) - set(PARTIALS)
        if unknown:
            raise ConfigurationError(f"unknown partial derivatives {sorted(unknown)}")

    def check_dims(self, M: int = 3) -> None:
        x = np.zeros((M, self.n))
        u = np.zeros((M, self.k))
        w = np.zeros(M)
        y = np.zeros(M)
        checks = {
            "b": (self.b(0.0, x, u, w), (M, self.n)),
            "sigma": (self.sigma(0.0, x, u, w), (M, self.n)),
            "f": (self.f(0.0, x, y, y, u, w), (M,)),
            "h": (self.h(x, w), (M,)),
        }
        for name, (val, shape) in checks.items():
            if np.shape(val) != shape:
                raise ConfigurationError(f"{name} returned shape {np.shape(val)}, expected {shape}")

    def has_partial(self, name: str) -> bool:
        return name in self.partials

    def partial(self, name: str, *args) -> np.ndarray:
        """Evaluate a coefficient partial derivative.

        Shapes: ``b_x, sigma_x`` (M,n,n) with ``[i, j] = d_i/dx_j``; ``b_u,
        sigma_u`` (M,n,k); ``f_x`` (M,n); ``f_y, f_z`` (M,); ``f_u`` (M,k);
        ``h_x`` (M,n).  ``args`` are the arguments of the underlying coefficient.
        """
        if name in self.partials:
            return np.asarray(self.partials[name](*args), dtype=float)
        if not self.finite_differences:
            raise ConfigurationError(f"no evaluator for {name} and finite differences disabled")
        coef, var = name.split("_")
        fn = getattr(self, coef)
        pos = {
            ("b", "x"): 1, ("b", "u"): 2, ("sigma", "x"): 1, ("sigma", "u"): 2,
            ("f", "x"): 1, ("f", "y"): 2, ("f", "z"): 3, ("f", "u"): 4, ("h", "x"): 0,
        }[(coef, var)]
        return central_difference(fn, list(args), pos)


def central_difference(fn: Callable, args: list, pos: int) -> np.ndarray:
    """Central difference of ``fn(*args)`` in argument ``pos``.

    For a vector argument ``(M, d)`` the differentiated axis is appended last.
    """
    base = np.asarray(args[pos], dtype=float)
    if base.ndim == 1:
        h = _fd_step(base)
        up = list(args)
        dn = list(args)
        up[pos] = base + h
        dn[pos] = base - h
        return (np.asarray(fn(*up)) - np.asarray(fn(*dn))) / (2 * h)
    cols = []
    for j in range(base.shape[1]):
        h = _fd_step(base[:, j])
        e = np.zeros_like(base)
        e[:, j] = h
        up = list(args)
        dn = list(args)
        up[pos] = base + e
        dn[pos] = base - e
        d = (np.asarray(fn(*up)) - np.asarray(fn(*dn)))
        hb = h.reshape((-1,) + (1,) * (d.ndim - 1))
        cols.append(d / (2 * hb))
    return np.stack(cols, axis=-1)
