"""Convergence studies: rerun an experiment along one axis and fit log-log slopes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigurationError
from .config import ExperimentConfig
from .experiments import run_experiment
from .report import Row

AXES = {"N": "grid.N", "M": "mc.M", "degree": "basis.degree"}


@dataclass
class StudyResult:
    experiment: str
    axis: str
    values: list
    x: np.ndarray  # abscissa of the fit: dt for N, 1/M for M, degree otherwise
    error: np.ndarray
    se: np.ndarray
    error_slope: float
    se_slope: float
    rows: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def table(self) -> list:
        return [{"value": v, "x": float(x), "error": float(e), "se": float(s)}
                for v, x, e, s in zip(self.values, self.x, self.error, self.se)]


def fit_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``; ``nan`` if any ``y <= 0``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0) or np.any(x <= 0):
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def _abscissa(axis, cfg, values):
    v = np.asarray(values, dtype=float)
    if axis == "N":
        return (cfg.grid.T - cfg.grid.t0) / v
    if axis == "M":
        return 1.0 / v
    return v


def convergence_study(cfg: ExperimentConfig, axis: str, values, statistic=None, slope_range=None,
                      se_ratio_tol: float = 0.30, write: bool = True) -> StudyResult:
    """Rerun ``cfg`` for each value of ``axis`` and fit error and SE slopes.

    The error of a run is ``|measured - target|`` of ``statistic`` (default:
    its first row).  Slopes are fitted against ``dt`` for the N axis and
    ``1/M`` for the M axis, so the Euler strong rate and the Monte Carlo law
    both show up as slopes near 0.5.  Criterion rows: the error slope lies
    in ``slope_range`` (default ``[0.35, 0.65]`` on the N axis); on the M axis
    each SE ratio between consecutive runs is within ``se_ratio_tol`` of
    ``sqrt(M_{i+1}/M_i)``.
    """
    if axis not in AXES:
        raise ConfigurationError(f"unknown study axis {axis!r}; use one of {sorted(AXES)}")
    values = list(values)
    if len(values) < 3:
        raise ConfigurationError("a convergence study needs at least 3 values")
    if list(values) != sorted(values):
        raise ConfigurationError("study values must be sorted ascending")
    errors, ses = [], []
    for v in values:
        run_cfg = cfg.replace(**{AXES[axis]: int(v)})
        run_cfg.output_dir = str(Path(cfg.output_dir) / f"study_{axis}_{v}")
        rep = run_experiment(run_cfg, write=write)
        row = rep.row(statistic) if statistic else rep.rows[0]
        errors.append(abs(row.measured - row.target))
        ses.append(row.se)
    x = _abscissa(axis, cfg, values)
    err, se = np.array(errors), np.array(ses)
    res = StudyResult(cfg.experiment, axis, values, x, err, se, fit_slope(x, err), fit_slope(x, se))
    if slope_range is None and axis == "N":
        slope_range = (0.35, 0.65)
    if slope_range is not None:
        lo, hi = slope_range
        res.rows.append(Row("error_slope", res.error_slope, 0.5 * (lo + hi), 0.5 * (hi - lo),
                            experiment=cfg.experiment))
    if axis == "M":
        for i in range(len(values) - 1):
            expected = float(np.sqrt(values[i + 1] / values[i]))
            ratio = se[i] / se[i + 1] if se[i + 1] > 0 else float("nan")
            res.rows.append(Row(f"se_ratio_{values[i]}_{values[i + 1]}", ratio, expected,
                                se_ratio_tol * expected, experiment=cfg.experiment))
    if write:
        write_study(res, Path(cfg.output_dir) / f"{cfg.experiment}.study_{axis}.csv")
    return res


def write_study(res: StudyResult, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["value", "x", "error", "se"])
        for r in res.table():
            wr.writerow([r["value"], repr(r["x"]), repr(r["error"]), repr(r["se"])])
        wr.writerow([])
        wr.writerow(["error_slope", repr(res.error_slope)])
        wr.writerow(["se_slope", repr(res.se_slope)])
        for r in res.rows:
            wr.writerow([r.statistic, repr(r.measured), repr(r.target), repr(r.tolerance),
                         str(r.passed).lower()])
    return path
