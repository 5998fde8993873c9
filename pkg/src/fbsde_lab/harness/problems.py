"""Problem serialization: JSON mappings to problem data."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core import ProblemSpec
from ..errors import ConfigurationError, SchemaError
from ..lq import FIELDS, LqCoefficients

_KEYS = {
    "lq": {"kind", "n", "k", "coefficients", "x0", "margin"},
    "sine_drift": {"kind", "sigma", "f_y", "f_z", "x0"},
    "gbm": {"kind", "mu", "sigma", "x0"},
}


@dataclass(frozen=True, eq=False)
class Problem:
    kind: str
    spec: ProblemSpec
    x0: np.ndarray
    lq: Optional[LqCoefficients] = None


def problem_errors(raw: dict) -> list:
    """Offending keys of a problem mapping (empty when valid)."""
    kind = raw.get("kind")
    if kind not in _KEYS:
        return ["problem.kind"]
    bad = [f"problem.{k}" for k in raw if k not in _KEYS[kind]]
    if kind == "lq":
        coeffs = raw.get("coefficients", {})
        if not isinstance(coeffs, dict):
            bad.append("problem.coefficients")
        else:
            bad += [f"problem.coefficients.{k}" for k in coeffs if k not in FIELDS]
    return bad


def sine_drift_spec(sigma: float = 0.2, f_y: float = 0.5, f_z: float = 0.25) -> ProblemSpec:
    """``b = sin x + u``, constant ``sigma``, ``f = f_y y + f_z z + u^2``, ``h = x^2 / (1 + x^2)``."""

    def zeros3(x):
        return np.zeros((x.shape[0], 1, 1))

    partials = {
        "b_x": lambda t, x, u, w: np.cos(x)[:, :, None],
        "b_u": lambda t, x, u, w: np.ones((x.shape[0], 1, 1)),
        "sigma_x": lambda t, x, u, w: zeros3(x),
        "sigma_u": lambda t, x, u, w: zeros3(x),
        "f_x": lambda t, x, y, z, u, w: np.zeros_like(x),
        "f_y": lambda t, x, y, z, u, w: np.full(x.shape[0], f_y),
        "f_z": lambda t, x, y, z, u, w: np.full(x.shape[0], f_z),
        "f_u": lambda t, x, y, z, u, w: 2 * u,
        "h_x": lambda x, w: 2 * x / (1 + x ** 2) ** 2,
    }
    return ProblemSpec(
        b=lambda t, x, u, w: np.sin(x) + u,
        sigma=lambda t, x, u, w: np.full_like(x, sigma),
        f=lambda t, x, y, z, u, w: f_y * y + f_z * z + u[:, 0] ** 2,
        h=lambda x, w: x[:, 0] ** 2 / (1 + x[:, 0] ** 2),
        n=1, k=1, partials=partials, label="sine_drift",
    )


def gbm_spec(mu: float = 0.1, sigma: float = 0.2) -> ProblemSpec:
    """Uncontrolled geometric Brownian motion with a zero cost."""
    return ProblemSpec(
        b=lambda t, x, u, w: mu * x,
        sigma=lambda t, x, u, w: sigma * x,
        f=lambda t, x, y, z, u, w: np.zeros(x.shape[0]),
        h=lambda x, w: x[:, 0],
        n=1, k=1,
        partials={"b_x": lambda t, x, u, w: np.full((x.shape[0], 1, 1), mu),
                  "sigma_x": lambda t, x, u, w: np.full((x.shape[0], 1, 1), sigma)},
        label="gbm",
    )


def build_problem(raw: dict, T: float) -> Problem:
    bad = problem_errors(raw)
    if bad:
        raise SchemaError("invalid problem", tuple(bad))
    kind = raw["kind"]
    try:
        if kind == "lq":
            n, k = int(raw.get("n", 1)), int(raw.get("k", 1))
            coeffs = LqCoefficients.from_values(n=n, k=k, margin=float(raw.get("margin", 1e-10)),
                                                **raw.get("coefficients", {}))
            x0 = np.broadcast_to(np.asarray(raw.get("x0", 1.0), dtype=float), (n,)).copy()
            return Problem(kind, coeffs.to_problem_spec(T), x0, coeffs)
        x0 = np.atleast_1d(np.asarray(raw.get("x0", 1.0), dtype=float))
        if kind == "sine_drift":
            spec = sine_drift_spec(float(raw.get("sigma", 0.2)), float(raw.get("f_y", 0.5)),
                                   float(raw.get("f_z", 0.25)))
        else:
            spec = gbm_spec(float(raw.get("mu", 0.1)), float(raw.get("sigma", 0.2)))
        return Problem(kind, spec, x0)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise SchemaError(f"cannot build {kind} problem: {exc}", ("problem",)) from exc
