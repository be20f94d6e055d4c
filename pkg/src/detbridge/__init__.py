"""Determinant-state subspace tools and Bridge post-processing for spin dynamics."""

__version__ = "0.1.0"

from .bridge import bridge_infidelity, bridge_observable, bridge_solve, optimal_in_subspace
from .dynamics import generate_basis, parse_scheme
from .oracle import ExactPropagator, diagonalize, ground_state, infidelity
from .rayleigh import (
    GramPack,
    Policy,
    RayleighEstimate,
    assemble_rayleigh,
    estimate_det_state,
    estimate_sum_of_states,
    exact_gram_pack,
)
from .spin_model import Geometry, OperatorTerms, build_tfim, magnetization_x
from .states import AmplitudeState, BasisFamily, uniform_state
from .subspace import ritz_spectrum, subspace_distance_exact, subspace_distance_mc

__all__ = [name for name in dir() if not name.startswith("_")]
