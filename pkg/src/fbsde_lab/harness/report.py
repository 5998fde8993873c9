"""Run reports: criterion rows, the pass/fail rule, CSV and JSON manifest output."""

from __future__ import annotations

import csv
import json
import math
import platform
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SE_MULTIPLIER = 3.0
CSV_COLUMNS = ("experiment", "statistic", "measured", "target", "tolerance", "se", "kind", "passed",
               "wall_time")


def decide(measured: float, target: float, tolerance: float, se: float = 0.0, kind: str = "abs") -> bool:
    """Pass/fail for one criterion.

    ``abs``: ``|measured - target| <= tolerance + 3 se``; ``max``: ``measured <=
    target + tolerance + 3 se``; ``min``: ``measured >= target - tolerance - 3 se``.
    Non-finite measurements fail.
    """
    if not math.isfinite(measured):
        return False
    slack = tolerance + SE_MULTIPLIER * (se if math.isfinite(se) else math.inf)
    if kind == "abs":
        return abs(measured - target) <= slack
    if kind == "max":
        return measured <= target + slack
    if kind == "min":
        return measured >= target - slack
    raise ValueError(f"unknown criterion kind {kind!r}")


@dataclass
class Row:
    statistic: str
    measured: float
    target: float = 0.0
    tolerance: float = 0.0
    se: float = 0.0
    kind: str = "abs"
    experiment: str = ""
    wall_time: float = 0.0
    passed: bool = field(init=False)

    def __post_init__(self):
        self.measured = float(self.measured)
        self.target = float(self.target)
        self.tolerance = float(self.tolerance)
        self.se = float(self.se)
        self.passed = decide(self.measured, self.target, self.tolerance, self.se, self.kind)

    def line(self) -> str:
        op = {"abs": "~", "max": "<=", "min": ">="}[self.kind]
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.experiment}.{self.statistic}: measured={self.measured:.6g} "
                f"{op} target={self.target:.6g} (tol={self.tolerance:.3g}, se={self.se:.3g})")


@dataclass
class RunReport:
    experiment: str
    rows: list
    config: dict
    wall_time: float
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.passed for r in self.rows)

    def row(self, statistic: str) -> Row:
        for r in self.rows:
            if r.statistic == statistic:
                return r
        raise KeyError(statistic)

    def summary(self) -> str:
        return "\n".join(r.line() for r in self.rows)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in rows:
            d = asdict(r)
            wr.writerow([_fmt(d[c]) for c in CSV_COLUMNS])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def write_manifest(report: RunReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "experiment": report.experiment,
        "passed": report.passed,
        "config": report.config,
        "seeds": {"mc.seed": report.config["mc"]["seed"]},
        "environment": {"N": report.config["grid"]["N"], "M": report.config["mc"]["M"],
                        "python": platform.python_version(), "numpy": np.__version__},
        "rows": [asdict(r) for r in report.rows],
        "extras": report.extras,
        "wall_time": report.wall_time,
    }
    path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")
    return path


def write_report(report: RunReport, output_dir) -> tuple:
    out = Path(output_dir)
    return (write_csv(report.rows, out / f"{report.experiment}.csv"),
            write_manifest(report, out / f"{report.experiment}.manifest.json"))
