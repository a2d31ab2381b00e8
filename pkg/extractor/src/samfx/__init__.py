"""Slice-wise SAM image-encoder feature extraction for volume registration."""

from .mvf import MVFError, read_mvf, write_mvf
from .pipeline import ExtractorConfig, extract_features, extract_file
from .vit import VARIANTS, build_encoder, load_encoder, make_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ExtractorConfig",
    "MVFError",
    "VARIANTS",
    "build_encoder",
    "extract_features",
    "extract_file",
    "load_encoder",
    "make_checkpoint",
    "read_mvf",
    "write_mvf",
]
