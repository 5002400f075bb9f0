"""Immersed B-spline transport modelling for tracer-enhanced brain imaging."""

from .divfree import solve_correction, weak_divergence_residual
from .errors import ConfigurationError, DomainError, NumericalError
from .forward import ForwardProblem, TransportCoefficients, assemble_operators, relative_error, supg_sigma
from .immersed import ImmersedDomain, LevelSet, build_domain
from .inverse import (CalibrationWindow, InverseOptions, InverseProblem, ParameterVector, run_inversion,
                      validation_errors)
from .phantom import PhantomSpec, corrupt_fd_velocity, fd_velocity_field, generate
from .spline_space import Field, SplineSpace, VectorField, eval_field, l2_project, quasi_interpolate
from .volume_io import VoxelVolume, read_field, read_volume, write_field, write_volume

__all__ = [
    "CalibrationWindow", "ConfigurationError", "DomainError", "Field", "ForwardProblem", "ImmersedDomain",
    "InverseOptions", "InverseProblem", "LevelSet", "NumericalError", "ParameterVector", "PhantomSpec",
    "SplineSpace", "TransportCoefficients", "VectorField", "VoxelVolume", "assemble_operators", "build_domain",
    "corrupt_fd_velocity", "eval_field", "fd_velocity_field", "generate", "l2_project", "quasi_interpolate",
    "read_field", "read_volume", "relative_error", "run_inversion", "solve_correction", "supg_sigma",
    "validation_errors", "weak_divergence_residual", "write_field", "write_volume",
]
