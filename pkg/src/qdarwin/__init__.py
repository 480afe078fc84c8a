"""Signaling no-go protocols and spin-bath decoherence with exact density-matrix oracles."""

from qdarwin.errors import InvariantError, ResourceCapError, StateValidityError
from qdarwin.qmath import DensityOperator, JointDistribution, fidelity, partial_trace, von_neumann_entropy

__version__ = "0.1.0"

__all__ = [
    "DensityOperator",
    "InvariantError",
    "JointDistribution",
    "ResourceCapError",
    "StateValidityError",
    "fidelity",
    "partial_trace",
    "von_neumann_entropy",
]
