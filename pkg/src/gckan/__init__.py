"""Granger causality inference with component-wise Kolmogorov-Arnold networks."""

__version__ = "0.1.0"

from .datagen import GroundTruthGraph, Lorenz96Config, VarConfig, generate_var, simulate_lorenz96
from .evalmetrics import EvalSpec, aggregate, auroc, gc_auroc
from .fusion import FusionConfig, fuse_gc, infer_with_fusion, reverse_panel
from .granger import GcResult, ModelConfig, TimeSeriesPanel, fit_gckan, select_penalties
from .trainer import TrainConfig

__all__ = [
    "__version__",
    "GroundTruthGraph",
    "Lorenz96Config",
    "VarConfig",
    "generate_var",
    "simulate_lorenz96",
    "EvalSpec",
    "aggregate",
    "auroc",
    "gc_auroc",
    "FusionConfig",
    "fuse_gc",
    "infer_with_fusion",
    "reverse_panel",
    "GcResult",
    "ModelConfig",
    "TimeSeriesPanel",
    "fit_gckan",
    "select_penalties",
    "TrainConfig",
]
