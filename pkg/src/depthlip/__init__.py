"""Depth-aware lip-sync conditioning pipeline.

Library and CLI covering: linear 3DMM face reconstruction, weak-perspective
depth rasterization with mouth masking and augmentation, log-mel audio
features, conditioning-tensor assembly for a single-step UNet with audio
cross-attention, toy training with hand-derived gradients, dataset
preprocessing, and an unpaired lip-sync proxy evaluation.
"""

from .errors import FormatError, PipelineError, TrainingDivergence

__version__ = "0.1.0"

__all__ = ["FormatError", "PipelineError", "TrainingDivergence", "__version__"]
