"""Frozen-backbone feature extraction for the chips scoring pipeline.

Couples to the scorer only through its on-disk contracts: CHFS feature
shards and CHEP endpoint checkpoints.
"""

from .dataset import Sample, load_pixels, read_manifest
from .errors import DatasetError, DimMismatch, ExtractorError, ModelError
from .extract import ExtractionJob, extract
from .features import image_descriptor, text_descriptor
from .formats import write_endpoint_checkpoint, write_feature_shard
from .models import DualEncoderModel, builtin_models, export_checkpoint, load_model

__all__ = [
    "DatasetError",
    "DimMismatch",
    "DualEncoderModel",
    "ExtractionJob",
    "ExtractorError",
    "ModelError",
    "Sample",
    "builtin_models",
    "export_checkpoint",
    "extract",
    "image_descriptor",
    "load_model",
    "load_pixels",
    "read_manifest",
    "text_descriptor",
    "write_endpoint_checkpoint",
    "write_feature_shard",
]
