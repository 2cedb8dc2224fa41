"""Distance-assisted recursive testing: aggregation trees and layerwise FDR control."""

from __future__ import annotations

__version__ = "0.1.0"

from .core import (
    AggregationTree,
    ConfigError,
    DartError,
    DistanceMatrix,
    Node,
    NumericError,
    PValueVector,
    TestOutcome,
    TruthAssignment,
    UndefinedMetricError,
    ValidationError,
    euclidean_distances,
    feature_fdp,
    sensitivity,
    validate_distance_matrix,
    weighted_node_fdp,
)
from .engine import combine_pvalues, layer1_threshold, run_bh, run_dart
from .tree import build_tree
from .tuning import auto_tree, default_L, select_g, step_size

__all__ = [
    "AggregationTree",
    "ConfigError",
    "DartError",
    "DistanceMatrix",
    "Node",
    "NumericError",
    "PValueVector",
    "TestOutcome",
    "TruthAssignment",
    "UndefinedMetricError",
    "ValidationError",
    "__version__",
    "auto_tree",
    "build_tree",
    "combine_pvalues",
    "default_L",
    "euclidean_distances",
    "feature_fdp",
    "layer1_threshold",
    "run_bh",
    "run_dart",
    "select_g",
    "sensitivity",
    "step_size",
    "validate_distance_matrix",
    "weighted_node_fdp",
]
