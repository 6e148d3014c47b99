"""Hybrid occupancy / signed-distance neural surface reconstruction on analytic scenes."""
from .estimator import OccSDFReconstructor
from .fields import FieldConfig, OccSDFField
from .mesh import MeshMetricsReport, TriangleMesh, evaluate, extract_mesh
from .renderer import SamplingConfig, render_rays
from .training import TrainConfig, train

__all__ = [
    "FieldConfig",
    "MeshMetricsReport",
    "OccSDFField",
    "OccSDFReconstructor",
    "SamplingConfig",
    "TrainConfig",
    "TriangleMesh",
    "evaluate",
    "extract_mesh",
    "render_rays",
    "train",
]
__version__ = "0.1.0"
