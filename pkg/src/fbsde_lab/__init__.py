"""Numerical laboratory for recursive stochastic optimal control with random coefficients.

Modules: ``core`` (grids, Brownian drivers, coefficients, controls),
``sde`` (forward simulation), ``bsde`` (least-squares Monte Carlo),
``lq`` (stochastic Riccati equation and LQ checks), ``hamilton``
(maximum-principle machinery), ``dpp`` (value fields and HJB residuals)
and ``harness`` (experiments and the command line).
"""

__version__ = "0.1.0"
