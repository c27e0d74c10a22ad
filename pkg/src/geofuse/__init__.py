"""Geometry-guided multi-view feature learning and fusion for TSDF reconstruction of synthetic rooms."""

from .config import LossConfig, PipelineConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["LossConfig", "PipelineConfig", "TrainConfig", "__version__"]
