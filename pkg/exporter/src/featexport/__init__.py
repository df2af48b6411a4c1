"""Bridge a pretrained dual encoder into the labelalign engine formats."""

from .errors import ExportDataError, ExportUsageError
from .manifest import ExportManifest
from .export import SourceModel, export_features, export_vocab, load_source

__all__ = [
    "ExportDataError",
    "ExportUsageError",
    "ExportManifest",
    "SourceModel",
    "export_features",
    "export_vocab",
    "load_source",
]
