"""Swin-style multi-task regressor and the single-patch CNN baseline."""

from .config import VARIANTS, ModelConfig
from .networks import (
    MASK_BIAS,
    attention_mask,
    cnn_baseline_forward,
    forward,
    geoformer_forward,
    patch_embed,
    predict,
    relative_index,
    swin_block,
    swin_layer,
    window_attention,
)
from .params import ModelParams, init_params, load_model, read_model_config, save_model, sidecar_path

__all__ = [
    "VARIANTS", "ModelConfig", "ModelParams", "init_params", "load_model", "read_model_config",
    "save_model", "sidecar_path", "MASK_BIAS", "attention_mask", "cnn_baseline_forward", "forward",
    "geoformer_forward", "patch_embed", "predict", "relative_index", "swin_block", "swin_layer",
    "window_attention",
]
