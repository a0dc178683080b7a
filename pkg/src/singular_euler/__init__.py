"""Randomized cutoff Euler-Maruyama schemes for SDEs with singular L^q-L^rho drift.

Modules: ``driftlib`` (drift families, admissibility, cutoffs, norms),
``scheme`` (path simulation), ``density`` (grid transition densities and
Duhamel residuals), ``gaussian`` (heat-kernel bounds), ``analysis`` (error
metrics, rate fits, Monte Carlo weak error, Gronwall-Volterra constants) and
``cli``.
"""

from .driftlib import DriftSpec, InadmissibleDrift, check_condition, cutoff
from .scheme import SchemeParams, simulate_path, simulate_terminals

__all__ = [
    "DriftSpec",
    "InadmissibleDrift",
    "SchemeParams",
    "check_condition",
    "cutoff",
    "simulate_path",
    "simulate_terminals",
]
__version__ = "0.1.0"
