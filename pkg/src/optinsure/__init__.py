"""Optimal investment, consumption and life insurance under inflation.

Modules: ``market`` (HJM curves, CPI, risky asset, jump atoms), ``mortality``,
``paths`` (simulation engine and wealth), ``generator`` (BSDE generators and
optimal controls), ``bsde`` (ODE, regression and Picard solvers),
``evaluation`` (Monte Carlo values and optimality checks), ``config`` and
``cli`` (scenario files and batch runs).
"""

__all__ = ["bsde", "cli", "config", "evaluation", "generator", "market", "mortality", "paths", "tables"]
