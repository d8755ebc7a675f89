"""Attention-gated dense CNN micro-framework: autodiff tensors, CBAM blocks,
a dense-connectivity backbone, two-phase training, Grad-CAM explanations,
and multi-seed evaluation."""

from .attention import CbamBlock, cbam_forward, channel_attention, init_cbam, spatial_attention
from .backbone import (
    BackboneConfig,
    CbamConfig,
    HeadConfig,
    Model,
    StemConfig,
    build_model,
    count_parameters,
    get_preset,
)
from .tensor import ParameterSet, ShapeError, Tensor, backward, finite_diff_grad

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "CbamBlock",
    "CbamConfig",
    "HeadConfig",
    "Model",
    "ParameterSet",
    "ShapeError",
    "StemConfig",
    "Tensor",
    "backward",
    "build_model",
    "cbam_forward",
    "channel_attention",
    "count_parameters",
    "finite_diff_grad",
    "get_preset",
    "init_cbam",
    "spatial_attention",
    "__version__",
]
