"""Numerical laboratory for Young towers, renewal operators and concentration.

Submodules
----------
dynamics
    Interval maps, shifts, orbit generation, return times.
tower
    Synthetic towers, walks and separation times.
seqcalc
    Moment-tagged sequences and weight systems.
transfer
    Renewal operator sequences, decay diagnostics, Ulam matrices.
observables
    Separately Lipschitz observables and the statistics built on them.
martingale
    Exact reverse-martingale decompositions on shifts.
concentration
    Monte Carlo deviation tails, weak norms and bound curves.
suites
    Fixed-threshold experiment suites.
cli
    Batch runner.

Set ``TOWERLAB_NUMBA=0`` before import to run the pure numpy kernels.
"""

from ._accel import backend_name
from .errors import BudgetExceeded, DomainError, InputError, InvariantViolation, ReturnTimeCapExceeded, TowerlabError

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "BudgetExceeded",
    "DomainError",
    "InputError",
    "InvariantViolation",
    "ReturnTimeCapExceeded",
    "TowerlabError",
    "__version__",
]
