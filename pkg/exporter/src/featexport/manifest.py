"""Export job description."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .errors import ExportDataError, ExportUsageError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp", ".gif", ".tiff")


@dataclass
class ExportManifest:
    """What to export from where.

    d_feat and d_model start unset and are recorded from the source model
    when it is loaded. The log collects per-run notes such as skipped
    images; export_features appends to it.
    """

    model_path: str
    image_root: str | None = None
    words: list[str] | None = None
    out_features: str | None = None
    out_vocab: str | None = None
    d_feat: int | None = None
    d_model: int | None = None
    log: list[str] = field(default_factory=list)


def discover_images(image_root: str) -> tuple[list[str], list[tuple[str, int, str]]]:
    """Class subfolders and their image files in deterministic order.

    Returns (class_names, entries) where entries are (class_name, label,
    path) sorted by class name, then by filename. Subfolder names become
    the category table, sorted lexicographically.
    """
    if not os.path.isdir(image_root):
        raise ExportDataError(f"image root {image_root!r} is not a directory")
    class_names = sorted(
        name for name in os.listdir(image_root)
        if os.path.isdir(os.path.join(image_root, name)) and not name.startswith(".")
    )
    if not class_names:
        raise ExportDataError(f"image root {image_root!r} has no class subfolders")
    entries = []
    for label, name in enumerate(class_names):
        folder = os.path.join(image_root, name)
        for fname in sorted(os.listdir(folder)):
            if fname.startswith("."):
                continue
            if not fname.lower().endswith(IMAGE_EXTENSIONS):
                continue
            entries.append((name, label, os.path.join(folder, fname)))
    if not entries:
        raise ExportDataError(f"image root {image_root!r} contains no image files")
    return class_names, entries


def load_words(words: list[str]) -> list[str]:
    """Validated, deduplicated word list; order of first occurrence kept."""
    import warnings

    if not words:
        raise ExportUsageError("word list is empty")
    seen = []
    for word in words:
        word = word.strip()
        if not word:
            raise ExportUsageError("word list contains an empty entry")
        if word in seen:
            warnings.warn(f"duplicate word {word!r} dropped", stacklevel=2)
            continue
        seen.append(word)
    return seen
