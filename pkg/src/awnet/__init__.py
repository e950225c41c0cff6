"""Attention W-Net retinal vessel segmentation."""
__version__ = "0.1.0"

from .model import AttentionBlock, AttentionWNet, ModelConfig, ResidualBlock, build_model, count_parameters

__all__ = [
    "AttentionBlock",
    "AttentionWNet",
    "ModelConfig",
    "ResidualBlock",
    "build_model",
    "count_parameters",
]
