"""Offline feature export for the precomputed encoder backend."""

from .blt0 import read_tensor, write_tensor
from .errors import EmptyCategoryList, ExportError, ModelUnavailable, UnreadableImage
from .export import ExportJob, export_embeddings, read_manifest
from .templates import TEMPLATES, expand_templates

__all__ = [
    "TEMPLATES",
    "EmptyCategoryList",
    "ExportError",
    "ExportJob",
    "ModelUnavailable",
    "UnreadableImage",
    "expand_templates",
    "export_embeddings",
    "read_manifest",
    "read_tensor",
    "write_tensor",
]
