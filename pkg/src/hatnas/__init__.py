"""Hardware-aware architecture search for small encoder-decoder transformers."""
from .design_space import ArchConfig, DesignSpace, ValidationError, encode_features, estimate_flops
from .supernet import ModelWeights, extract_sub, forward, init_super, load_weights, save_weights, slice_view

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "DesignSpace", "ValidationError", "encode_features", "estimate_flops",
    "ModelWeights", "extract_sub", "forward", "init_super", "load_weights", "save_weights", "slice_view",
]
