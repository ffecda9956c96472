"""Decomposed AC optimal power flow with smoothed two-stage coordination."""

from .netmodel import (
    Branch,
    Bus,
    Coupling,
    Decomposition,
    Network,
    NetworkError,
    StateVars,
    decompose,
    recompose,
)

__version__ = "0.1.0"

__all__ = [
    "Bus",
    "Branch",
    "Network",
    "Coupling",
    "Decomposition",
    "StateVars",
    "NetworkError",
    "decompose",
    "recompose",
    "__version__",
]
