"""Shared fixtures for the exporter tests.

Everything here is cached per process: one tiny saved dual-encoder
checkpoint, one loaded SourceModel, one image tree, and one exported
feature/vocab pair. Byte-level readers for both interchange formats live
here too so tests can check files without importing the engine.
"""

from __future__ import annotations

import functools
import os
import struct
import tempfile

import numpy as np
import torch
from PIL import Image
from transformers import CLIPConfig, CLIPImageProcessor, CLIPModel, CLIPTokenizer

from featexport import SourceModel, load_source

D_FEAT = 32
D_MODEL = 64
CLASS_COLORS = {
    "aqua": (0, 200, 200),
    "coral": (255, 120, 90),
    "olive": (120, 130, 40),
}
TEMPLATE_WORDS = ["a", "photo", "of", "."]


def char_vocab() -> dict[str, int]:
    """Wordpiece table mapping every lowercase letter and the period.

    Each character appears in plain and word-final form so the tokenizer
    can split any word made of those characters; anything else (digits,
    punctuation) falls through to the unknown token.
    """
    vocab = {"<|startoftext|>": 0, "<|endoftext|>": 1}
    for c in "abcdefghijklmnopqrstuvwxyz.":
        vocab[c] = len(vocab)
        vocab[c + "</w>"] = len(vocab)
    return vocab


@functools.lru_cache(maxsize=1)
def checkpoint_dir() -> str:
    """Save a small randomly initialized dual encoder and return its path."""
    path = os.path.join(tempfile.mkdtemp(prefix="featexport-model-"), "tiny")
    vocab = char_vocab()
    config = CLIPConfig(
        text_config={
            "hidden_size": D_MODEL,
            "intermediate_size": 2 * D_MODEL,
            "num_hidden_layers": 2,
            "num_attention_heads": 4,
            "vocab_size": len(vocab),
            "max_position_embeddings": 16,
            "bos_token_id": 0,
            "eos_token_id": 1,
        },
        vision_config={
            "hidden_size": 64,
            "intermediate_size": 128,
            "num_hidden_layers": 2,
            "num_attention_heads": 4,
            "image_size": 32,
            "patch_size": 16,
        },
        projection_dim=D_FEAT,
    )
    torch.manual_seed(7)
    model = CLIPModel(config).eval()
    tokenizer = CLIPTokenizer(vocab=vocab, merges=[])
    processor = CLIPImageProcessor(
        size={"shortest_edge": 32}, crop_size={"height": 32, "width": 32}
    )
    model.save_pretrained(path)
    tokenizer.save_pretrained(path)
    processor.save_pretrained(path)
    return path


@functools.lru_cache(maxsize=1)
def shared_source() -> SourceModel:
    return load_source(checkpoint_dir())


def make_image_tree(
    root: str,
    per_class: int,
    classes: dict[str, tuple[int, int, int]] | None = None,
    noise_seed: int = 5,
    broken_name: str | None = None,
) -> str:
    """Write one subfolder per class filled with noisy solid-color PNGs.

    PNG keeps the pixel bytes lossless so repeated exports see identical
    inputs. broken_name, when given, lands a non-image file with an image
    extension in the first class folder.
    """
    if classes is None:
        classes = CLASS_COLORS
    rng = np.random.default_rng(noise_seed)
    for name, rgb in classes.items():
        folder = os.path.join(root, name)
        os.makedirs(folder, exist_ok=True)
        for i in range(per_class):
            base = np.tile(np.array(rgb, dtype=np.float64), (40, 40, 1))
            noisy = np.clip(base + rng.normal(0.0, 25.0, base.shape), 0, 255)
            Image.fromarray(noisy.astype(np.uint8)).save(
                os.path.join(folder, f"img{i:02d}.png")
            )
    if broken_name is not None:
        first = sorted(classes)[0]
        with open(os.path.join(root, first, broken_name), "wb") as fh:
            fh.write(b"not an image at all")
    return root


@functools.lru_cache(maxsize=1)
def shared_tree() -> str:
    root = os.path.join(tempfile.mkdtemp(prefix="featexport-images-"), "train")
    return make_image_tree(root, per_class=12)


@functools.lru_cache(maxsize=1)
def exported_pair() -> tuple[str, str]:
    """Feature and vocab files exported once from the shared fixtures."""
    from featexport import ExportManifest, export_features, export_vocab

    out_dir = tempfile.mkdtemp(prefix="featexport-out-")
    features = os.path.join(out_dir, "real.feat")
    vocab = os.path.join(out_dir, "real.vocab")
    export_features(
        ExportManifest(
            model_path=checkpoint_dir(),
            image_root=shared_tree(),
            out_features=features,
        ),
        source=shared_source(),
    )
    export_vocab(
        ExportManifest(
            model_path=checkpoint_dir(),
            words=TEMPLATE_WORDS + sorted(CLASS_COLORS),
            out_vocab=vocab,
        ),
        source=shared_source(),
    )
    return features, vocab


def read_feature_file_bytes(path: str):
    """Parse a FeatureFile straight off its documented byte layout.

    Returns (version, d_feat, class_names, records) where records is the
    structured array of (id, label, feat) rows.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    assert blob[:8] == b"LAMMFEAT", "bad magic"
    off = 8
    version, d_feat = struct.unpack_from("<II", blob, off)
    off += 8
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    (n_classes,) = struct.unpack_from("<I", blob, off)
    off += 4
    names = []
    for _ in range(n_classes):
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        names.append(blob[off:off + length].decode("utf-8"))
        off += length
    dtype = np.dtype([("id", "<u8"), ("label", "<u4"), ("feat", "<f4", (d_feat,))])
    records = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
    off += records.nbytes
    assert off == len(blob), "trailing bytes after records"
    return version, d_feat, names, records


def read_vocab_file_bytes(path: str):
    """Parse a VocabFile; returns (version, tokens, embedding matrix)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    assert blob[:8] == b"LAMMVOCB", "bad magic"
    off = 8
    version, size, d_model = struct.unpack_from("<III", blob, off)
    off += 12
    tokens = []
    for _ in range(size):
        (length,) = struct.unpack_from("<I", blob, off)
        off += 4
        tokens.append(blob[off:off + length].decode("utf-8"))
        off += length
    matrix = np.frombuffer(blob, dtype="<f4", count=size * d_model, offset=off)
    off += matrix.nbytes
    assert off == len(blob), "trailing bytes after embeddings"
    return version, tokens, matrix.reshape(size, d_model)
