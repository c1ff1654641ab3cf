"""Semantic surfel SLAM for dynamic RGB-D scenes.

Geometric segmentation, detection-driven instance masks, residual-based
motion segmentation, two-stage camera tracking and per-object surfel maps.
"""

from .config import ConfigError, PipelineConfig, load_config
from .dataset import CategoryTable, DatasetError, Detection, TrajectoryRecord, load_tum_sequence
from .evaluation import AteReport, CloudCompareReport, EvaluationError, ate_rmse, cloud_compare
from .geometry import Frame, Intrinsics, Pose, se3_exp, se3_log
from .pipeline import Pipeline, PipelineError, PipelineResult, run_pipeline
from .synthetic import SyntheticScene, generate_synthetic, preset
from .timing import StageTimer, timing_report

__version__ = "0.1.0"

__all__ = [
    "AteReport", "CategoryTable", "CloudCompareReport", "ConfigError", "DatasetError", "Detection",
    "EvaluationError", "Frame", "Intrinsics", "Pipeline", "PipelineConfig", "PipelineError",
    "PipelineResult", "Pose", "StageTimer", "SyntheticScene", "TrajectoryRecord", "ate_rmse",
    "cloud_compare", "generate_synthetic", "load_config", "load_tum_sequence", "preset",
    "run_pipeline", "se3_exp", "se3_log", "timing_report",
]
