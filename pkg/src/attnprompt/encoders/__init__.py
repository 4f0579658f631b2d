from .adapters import LAYOUTS, load_external_encoder, save_encoder_weights
from .config import AttentionTrace, EncoderConfig, query_attention_mean
from .vit import (
    TOY_CONFIG,
    VisionEncoder,
    build_toy_vit,
    parameter_checksum,
    warmup_toy_vit,
)

__all__ = [
    "AttentionTrace",
    "EncoderConfig",
    "LAYOUTS",
    "TOY_CONFIG",
    "VisionEncoder",
    "build_toy_vit",
    "load_external_encoder",
    "parameter_checksum",
    "query_attention_mean",
    "save_encoder_weights",
    "warmup_toy_vit",
]
