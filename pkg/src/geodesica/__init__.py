"""Geodesic distances on immersed manifolds learned by solving the Eikonal equation."""

from .errors import (ConfigError, DegenerateMetric, DiagonalSample, FlatManifold, GeodesicaError, IoFault,
                     ManifoldMismatch, NonFiniteLoss, NumericalFault, OutOfBounds, SchemaMismatch,
                     SegmentEscapedDomain, StalledFlow, TrajectoryEscapedDomain)
from .manifold import Manifold, builtin
from .eikonal import DistanceModel, TrainingConfig, load_model, save_model, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DegenerateMetric", "DiagonalSample", "DistanceModel", "FlatManifold", "GeodesicaError",
    "IoFault", "Manifold", "ManifoldMismatch", "NonFiniteLoss", "NumericalFault", "OutOfBounds",
    "SchemaMismatch", "SegmentEscapedDomain", "StalledFlow", "TrainingConfig", "TrajectoryEscapedDomain",
    "builtin", "load_model", "save_model", "train",
]
