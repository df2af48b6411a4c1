"""Feature and vocabulary export through a pretrained dual encoder."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image
from transformers import CLIPImageProcessor, CLIPModel, CLIPTokenizer

from .errors import ExportDataError, ExportUsageError
from .formats import write_feature_file, write_vocab_file
from .manifest import ExportManifest, discover_images, load_words


@dataclass
class SourceModel:
    """A loaded dual encoder in inference mode plus its tokenizer pieces."""

    model: CLIPModel
    tokenizer: CLIPTokenizer
    processor: CLIPImageProcessor

    @property
    def d_feat(self) -> int:
        return int(self.model.config.projection_dim)

    @property
    def d_model(self) -> int:
        return int(self.model.config.text_config.hidden_size)


def load_source(model_path: str) -> SourceModel:
    try:
        model = CLIPModel.from_pretrained(model_path)
        tokenizer = CLIPTokenizer.from_pretrained(model_path)
        processor = CLIPImageProcessor.from_pretrained(model_path)
    except (OSError, ValueError) as e:
        raise ExportDataError(f"cannot load source model from {model_path!r}: {e}") from None
    model.eval()
    return SourceModel(model=model, tokenizer=tokenizer, processor=processor)


def _image_features(source: SourceModel, images: list[Image.Image]) -> np.ndarray:
    batch = source.processor(images=images, return_tensors="pt")
    with torch.no_grad():
        out = source.model.get_image_features(pixel_values=batch["pixel_values"])
    # transformers >= 5 returns the vision output object with the projected
    # feature in pooler_output; earlier releases return the tensor itself.
    feats = out.pooler_output if hasattr(out, "pooler_output") else out
    return feats.numpy().astype(np.float64)


def export_features(
    manifest: ExportManifest,
    source: SourceModel | None = None,
    batch_size: int = 16,
) -> dict:
    """Write one L2-normalized record per readable image.

    Records land in (class, filename) order regardless of how inference is
    batched. Unreadable images are skipped with a warning and a manifest
    log entry.
    """
    if manifest.image_root is None or manifest.out_features is None:
        raise ExportUsageError("manifest needs image_root and out_features")
    if batch_size < 1:
        raise ExportUsageError("batch_size must be >= 1")
    if source is None:
        source = load_source(manifest.model_path)
    manifest.d_feat = source.d_feat
    manifest.d_model = source.d_model

    class_names, entries = discover_images(manifest.image_root)
    opened: list[tuple[int, Image.Image]] = []
    skipped = 0
    for cls, label, path in entries:
        try:
            with Image.open(path) as img:
                opened.append((label, img.convert("RGB")))
        except (OSError, Image.DecompressionBombError) as e:
            skipped += 1
            note = f"skipped unreadable image {path}: {e}"
            manifest.log.append(note)
            warnings.warn(note, stacklevel=2)
    if not opened:
        raise ExportDataError(
            f"no readable images under {manifest.image_root!r} "
            f"({skipped} unreadable)"
        )

    rows = []
    for start in range(0, len(opened), batch_size):
        chunk = [img for _, img in opened[start:start + batch_size]]
        rows.append(_image_features(source, chunk))
    features = np.concatenate(rows, axis=0)
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    dead = np.where(norms[:, 0] == 0.0)[0]
    if dead.size:
        raise ExportDataError(f"image feature {dead[0]} has zero norm")
    features = features / norms

    labels = np.array([label for label, _ in opened], dtype=np.int64)
    item_ids = np.arange(len(opened), dtype=np.uint64)
    write_feature_file(
        manifest.out_features, item_ids, labels, features, class_names
    )
    return {
        "items": len(opened),
        "categories": len(class_names),
        "d_feat": source.d_feat,
        "skipped": skipped,
    }


def _content_token_ids(source: SourceModel, word: str) -> list[int]:
    # With add_special_tokens=False the ids are pure content, so an
    # unknown-token id can appear here and must NOT be filtered out:
    # CLIP vocabularies reuse the eos id for unk, and dropping it would
    # hide an unmappable word behind a truncated embedding.
    return list(source.tokenizer(word, add_special_tokens=False)["input_ids"])


def export_vocab(manifest: ExportManifest, source: SourceModel | None = None) -> dict:
    """Write one embedding row per word.

    A multi-token word is stored as the mean of its source token
    embeddings, which is the same collapse rule the engine applies at
    word init, so single rows stay faithful to the source model.
    """
    if manifest.words is None or manifest.out_vocab is None:
        raise ExportUsageError("manifest needs words and out_vocab")
    if source is None:
        source = load_source(manifest.model_path)
    manifest.d_feat = source.d_feat
    manifest.d_model = source.d_model

    words = load_words(manifest.words)
    table = source.model.text_model.embeddings.token_embedding.weight
    table = table.detach().numpy().astype(np.float64)
    unk = source.tokenizer.convert_tokens_to_ids(source.tokenizer.unk_token)

    unmappable = []
    rows = []
    for word in words:
        ids = _content_token_ids(source, word)
        if not ids or unk in ids:
            unmappable.append(word)
            continue
        rows.append(table[ids].mean(axis=0))
    if unmappable:
        raise ExportUsageError(
            "words not mappable to source-model tokens: "
            + ", ".join(repr(w) for w in unmappable)
        )
    write_vocab_file(manifest.out_vocab, words, np.stack(rows, axis=0))
    return {"vocab_size": len(words), "d_model": source.d_model}
