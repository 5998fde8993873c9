"""Run every config in scripts/configs plus the two convergence studies.

Usage: python3 scripts/run_all.py [output_dir]
"""

import sys
from pathlib import Path

from fbsde_lab.harness import convergence_study, load_config, run_experiment

HERE = Path(__file__).resolve().parent
STUDIES = [("sde_convergence.json", "N", [25, 50, 100, 200]),
           ("lq_value_match_random_lambda.json", "M", [1000, 4000, 16000])]


def main(argv) -> int:
    failed = 0
    for path in sorted((HERE / "configs").glob("*.json")):
        cfg = load_config(path)
        if len(argv) > 1:
            cfg.output_dir = argv[1]
        cfg.output_dir = str(Path(cfg.output_dir) / path.stem)
        report = run_experiment(cfg)
        failed += not report.passed
        print(f"== {path.stem} ({report.wall_time:.1f}s)")
        print(report.summary())
    for name, axis, values in STUDIES:
        cfg = load_config(HERE / "configs" / name)
        if len(argv) > 1:
            cfg.output_dir = argv[1]
        res = convergence_study(cfg, axis, values)
        failed += not res.passed
        print(f"== study {cfg.experiment} along {axis}: error slope {res.error_slope:.3f}, "
              f"se slope {res.se_slope:.3f}")
        for r in res.rows:
            print(r.line())
    print(f"{failed} failing run(s)")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
