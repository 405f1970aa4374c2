"""Patch-trained fully convolutional networks applied to whole images."""

from .architectures import FAMILIES, build_reference
from .estimators import PatchToImageSegmenter
from .graph import NetworkSpec, init_params, parameter_count, predict, receptive_radius

__version__ = "0.1.0"

__all__ = [
    "FAMILIES",
    "NetworkSpec",
    "PatchToImageSegmenter",
    "build_reference",
    "init_params",
    "parameter_count",
    "predict",
    "receptive_radius",
]
