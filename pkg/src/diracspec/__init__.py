"""Generalized Dirac eigenvalues lambda_k(beta) of conformal factors on spin surfaces,
their volume-normalized minimization, and checks of the resulting conformal invariants."""

from .geometry import (ConformalFactor, SpectralBasis, SurfaceSpec, build_sphere_basis, build_torus_basis,
                       evaluate_factor)
from .spectrum import QuadraticForms, WeightedSpectrum, assemble_forms, generalized_eigensolve, rayleigh_value, solve
from .variation import (ClusterWeights, MinimizeParams, OptimizationTrace, Status, concentration_scan,
                        curvature_bound_check, directional_derivative, euler_lagrange_residual, fixed_point_step,
                        minimize, zero_set_count)
from .invariants import (AubinBound, SphereTable, aubin_bound, friedrich_check, gap_check, normalized_eigenvalue,
                         sobolev_probe, sphere_value)

__all__ = [
    "ConformalFactor", "SpectralBasis", "SurfaceSpec", "build_sphere_basis", "build_torus_basis", "evaluate_factor",
    "QuadraticForms", "WeightedSpectrum", "assemble_forms", "generalized_eigensolve", "rayleigh_value", "solve",
    "ClusterWeights", "MinimizeParams", "OptimizationTrace", "Status", "concentration_scan",
    "curvature_bound_check", "directional_derivative", "euler_lagrange_residual", "fixed_point_step", "minimize",
    "zero_set_count", "AubinBound", "SphereTable", "aubin_bound", "friedrich_check", "gap_check",
    "normalized_eigenvalue", "sobolev_probe", "sphere_value",
]
