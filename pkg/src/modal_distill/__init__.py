"""Multimodal knowledge distillation for answer-difference prediction.

A small numpy autodiff engine, three single-modality teachers, a tri-modal
attention teacher, and an image+question student trained with L2 feature and
logit matching plus BCE.
"""

from .autodiff import Tensor, no_grad
from .data import CLASS_NAMES
from .models import ModelDims, build_model

__all__ = ["CLASS_NAMES", "ModelDims", "Tensor", "build_model", "no_grad"]
__version__ = "0.1.0"
