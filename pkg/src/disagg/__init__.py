"""Bayesian disaggregation regression.

Fits pixel-level rate surfaces to responses observed only as polygon
aggregates, with a sparse-precision Matern field, polygon iid effects and a
nested Laplace approximation. An adaptive Metropolis sampler provides a
reference posterior.
"""

from __future__ import annotations

from .errors import (
    NODATA,
    AlignmentError,
    DataError,
    DimensionError,
    DisaggError,
    FormatError,
    GeometryError,
    InternalError,
    NumericError,
    UsageError,
    ValidationError,
)
from .geoio import CovariateStack, Grid, Polygon, PolygonSet, read_ascii_grid, read_polygons
from .laplace import FitResult, fit, laplace_objective, summarize_fit
from .mcmc import ChainSet, Diagnostics, compare, rhat, run_chains, run_until_converged
from .model import DisaggModel, ModelSpec, PriorSpec
from .predictor import PredictionSet, compute_metrics, in_sample_metrics, predict_mean, predict_uncertainty
from .prepare import LatticeSpec, PreparedData, load_prepared, prepare_data, save_prepared, summarize
from .simulate import SimulationConfig, simulate_dataset
from .spde import FieldHyper, SparseCholesky, precision_matrix, projection_matrix

__version__ = "0.1.0"

__all__ = [
    "NODATA",
    "AlignmentError",
    "ChainSet",
    "CovariateStack",
    "DataError",
    "Diagnostics",
    "DimensionError",
    "DisaggError",
    "DisaggModel",
    "FieldHyper",
    "FitResult",
    "FormatError",
    "GeometryError",
    "Grid",
    "InternalError",
    "LatticeSpec",
    "ModelSpec",
    "NumericError",
    "Polygon",
    "PolygonSet",
    "PredictionSet",
    "PreparedData",
    "PriorSpec",
    "SimulationConfig",
    "SparseCholesky",
    "UsageError",
    "ValidationError",
    "compare",
    "compute_metrics",
    "fit",
    "in_sample_metrics",
    "laplace_objective",
    "load_prepared",
    "precision_matrix",
    "predict_mean",
    "predict_uncertainty",
    "prepare_data",
    "projection_matrix",
    "read_ascii_grid",
    "read_polygons",
    "rhat",
    "run_chains",
    "run_until_converged",
    "save_prepared",
    "simulate_dataset",
    "summarize",
    "summarize_fit",
]
