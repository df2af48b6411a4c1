"""Writers for the engine's FeatureFile and VocabFile interchange formats.

The byte layouts are the contract between this tool and the engine, so they
are implemented here against the documented format rather than imported:
the exporter must stay correct even when no engine install is present.

All multi-byte values are little-endian. Strings are a u32 byte length
followed by UTF-8 payload. Floats are 32-bit on disk.

FeatureFile:
    magic "LAMMFEAT" | version u32 | d_feat u32 | item count u64 |
    category count u32 | category names | records, each
    (id u64, label u32, feature f32 x d_feat)

VocabFile:
    magic "LAMMVOCB" | version u32 | vocab size u32 | d_model u32 |
    token strings | embedding matrix f32, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .errors import ExportUsageError

MAGIC_FEATURES = b"LAMMFEAT"
MAGIC_VOCAB = b"LAMMVOCB"
FORMAT_VERSION = 1


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _atomic_write(path: str, blob: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_feature_file(
    path: str,
    item_ids: np.ndarray,
    labels: np.ndarray,
    features: np.ndarray,
    class_names: list[str],
) -> None:
    n, d_feat = features.shape
    if item_ids.shape != (n,) or labels.shape != (n,):
        raise ExportUsageError("item_ids/labels/features row counts disagree")
    if n and (labels.min() < 0 or labels.max() >= len(class_names)):
        raise ExportUsageError("label outside the category range")
    parts = [
        MAGIC_FEATURES,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", d_feat),
        struct.pack("<Q", n),
        struct.pack("<I", len(class_names)),
    ]
    parts.extend(_pack_string(name) for name in class_names)
    rec = np.empty(n, dtype=np.dtype(
        [("id", "<u8"), ("label", "<u4"), ("feat", "<f4", (d_feat,))]
    ))
    rec["id"] = item_ids
    rec["label"] = labels.astype(np.uint32)
    rec["feat"] = features.astype(np.float32)
    parts.append(rec.tobytes())
    _atomic_write(path, b"".join(parts))


def write_vocab_file(path: str, tokens: list[str], embeddings: np.ndarray) -> None:
    v, d_model = embeddings.shape
    if len(tokens) != v:
        raise ExportUsageError("token count does not match embedding rows")
    if len(set(tokens)) != v:
        raise ExportUsageError("duplicate tokens in vocabulary")
    parts = [
        MAGIC_VOCAB,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", v),
        struct.pack("<I", d_model),
    ]
    parts.extend(_pack_string(t) for t in tokens)
    parts.append(embeddings.astype("<f4").tobytes())
    _atomic_write(path, b"".join(parts))
