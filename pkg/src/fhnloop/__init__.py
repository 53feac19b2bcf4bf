"""Heteroclinic-loop wave trains of the FitzHugh-Nagumo system.

Construction of the front/back loop and the large-period periodic waves that
bifurcate from it, the reduced Evans determinant near the origin, Hill's
method Bloch spectra, and co-moving-frame PDE experiments.
"""

from .model import (
    CouplingMatrixB,
    DegenerateEquilibriumError,
    Equilibrium,
    LeadingEigenvalueError,
    ModelParams,
    coupling_matrix,
    find_equilibria,
    reaction,
    reaction_deriv,
    spectral_split,
    symmetric_gamma,
    tw_jacobian,
    tw_vector_field,
)

__version__ = "0.1.0"

__all__ = [
    "CouplingMatrixB",
    "DegenerateEquilibriumError",
    "Equilibrium",
    "LeadingEigenvalueError",
    "ModelParams",
    "coupling_matrix",
    "find_equilibria",
    "reaction",
    "reaction_deriv",
    "spectral_split",
    "symmetric_gamma",
    "tw_jacobian",
    "tw_vector_field",
]
