"""Gaussian-process directional-distance shape templates and pose confidence."""
from .confidence import (ConfidenceReport, Correspondences, accept_pose, back_project,
                         confidence_bound, score_pose)
from .dataprep import SurfacePointCloud, TriangleMesh, normalize_mesh, normalize_unit_sphere
from .errors import GPShapeError
from .geometry import CameraIntrinsics, RigidTransform
from .gp import GpModel, KernelConfig, OptimizerConfig
from .metrics import add_metric, chamfer, nn_baseline_eval, precision_recall_f, spearman
from .template import ShapeTemplate, build_template, load, save

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "ConfidenceReport", "Correspondences", "GPShapeError", "GpModel",
    "KernelConfig", "OptimizerConfig", "RigidTransform", "ShapeTemplate", "SurfacePointCloud",
    "TriangleMesh", "accept_pose", "add_metric", "back_project", "build_template", "chamfer",
    "confidence_bound", "load", "nn_baseline_eval", "normalize_mesh", "normalize_unit_sphere",
    "precision_recall_f", "save", "score_pose", "spearman",
]
