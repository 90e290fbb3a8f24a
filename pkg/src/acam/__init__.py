"""Adaptive contrast adjustment for grayscale image classification."""

from .backbones import BackboneConfig, Classifier, adapt_stem, build_backbone, forward_classify, named_config
from .contrast import (
    ContrastParams,
    GrayImage,
    MultiViewStack,
    PredictorWeights,
    RangeSpec,
    acam_forward,
    apply_contrast,
    generate_views,
    image_mean,
    init_predictor,
    map_to_range,
    predict_raw,
)
from .diffcore import Tensor, backward, finite_diff_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "Classifier",
    "adapt_stem",
    "build_backbone",
    "forward_classify",
    "named_config",
    "ContrastParams",
    "GrayImage",
    "MultiViewStack",
    "PredictorWeights",
    "RangeSpec",
    "acam_forward",
    "apply_contrast",
    "generate_views",
    "image_mean",
    "init_predictor",
    "map_to_range",
    "predict_raw",
    "Tensor",
    "backward",
    "finite_diff_check",
    "no_grad",
]
