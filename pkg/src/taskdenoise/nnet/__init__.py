"""Small numpy network kernel: extractors, heads, loss and optimizer."""

from .checkpoint import load_params, save_params
from .model import (
    ARCHITECTURES,
    BANDPOWER_MLP,
    BANDS,
    COMPACT_CNN,
    ModelParams,
    backward,
    band_powers,
    classifier_forward,
    cross_entropy,
    cross_entropy_grad,
    extractor_backward,
    extractor_forward,
    init_params,
    predict,
    proxy_forward,
    selector_forward,
    sigmoid,
    softmax,
)
from .optim import OptimizerState, adamw_step, clip_gradients, cosine_lr, max_norm_project

__all__ = [
    "ARCHITECTURES",
    "BANDPOWER_MLP",
    "BANDS",
    "COMPACT_CNN",
    "ModelParams",
    "OptimizerState",
    "adamw_step",
    "backward",
    "band_powers",
    "classifier_forward",
    "clip_gradients",
    "cosine_lr",
    "cross_entropy",
    "cross_entropy_grad",
    "extractor_backward",
    "extractor_forward",
    "init_params",
    "load_params",
    "max_norm_project",
    "predict",
    "proxy_forward",
    "save_params",
    "selector_forward",
    "sigmoid",
    "softmax",
]
