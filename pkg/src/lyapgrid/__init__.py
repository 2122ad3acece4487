"""Transient simulation, Lyapunov stability analysis and greedy renewable
allocation for power networks modeled as differential-algebraic systems."""

__version__ = "0.1.0"

from .errors import InputError, NumericalError  # noqa: F401
from .netmodel import PowerNetwork, build_admittance, load_case, parse_matpower_case  # noqa: F401
from .powerflow import solve_powerflow  # noqa: F401
