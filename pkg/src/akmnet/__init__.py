"""Adaptive key-frame mining for variable-length sequence classification.

A small numpy-backed autodiff core, a frame backbone, a differentiable
key-frame selection layer with a pixel-wise recurrent head, and the
training, evaluation and data plumbing around them.
"""

from . import tensor
from .backbone import BackboneConfig, desk_backbone, paper_backbone
from .gradcheck import GradCheckReport, grad_check
from .model import AkmNet, ModelConfig, build_model
from .rng import RngStream, dropout_mask
from .tensor import ShapeMismatch, Tensor
from .train import TrainConfig, train
from .variants import make_variant

__version__ = "0.1.0"

__all__ = [
    "tensor",
    "Tensor",
    "ShapeMismatch",
    "RngStream",
    "dropout_mask",
    "grad_check",
    "GradCheckReport",
    "BackboneConfig",
    "paper_backbone",
    "desk_backbone",
    "AkmNet",
    "ModelConfig",
    "build_model",
    "TrainConfig",
    "train",
    "make_variant",
    "__version__",
]
