"""Reflected BSDEs with jumps on a binomial-Poisson lattice, nonlinear optimal
stopping by brute-force enumeration, and American option pricing."""

from . import market  # noqa: F401  (registers the market drivers in the catalog)
from .bsde import Driver, linear_driver, make_driver, solve_bsde, zero_driver
from .errors import InvalidInput, NlstopError
from .lattice import GridSpec, Lattice, Node, Phase, Process, StoppingRule, build_lattice
from .rbsde import Obstacle, RbsdeSolution, solve_rbsde
from .stopping import oracle_search, strict_value_by_oracle, value_by_oracle

__version__ = "0.1.0"

__all__ = [
    "Driver",
    "GridSpec",
    "InvalidInput",
    "Lattice",
    "NlstopError",
    "Node",
    "Obstacle",
    "Phase",
    "Process",
    "RbsdeSolution",
    "StoppingRule",
    "build_lattice",
    "linear_driver",
    "make_driver",
    "oracle_search",
    "solve_bsde",
    "solve_rbsde",
    "strict_value_by_oracle",
    "value_by_oracle",
    "zero_driver",
]
