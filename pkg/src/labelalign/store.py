"""Bit-exact file formats plus report serialization.

Three binary carriers, all little-endian with 32-bit reals on disk and
64-bit working copies in memory:

FeatureFile  magic "LAMMFEAT" | version u32 | d_feat u32 | item_count u64
             | category_count u32 | categories (u32 len + UTF-8 each)
             | records: item id u64, label u32, d_feat x f32
VocabFile    magic "LAMMVOCB" | version u32 | vocab_size u32 | d_model u32
             | tokens (u32 len + UTF-8 each) | matrix f32 row-major
CheckpointFile magic "LAMMCKPT" | version u32 | K u32 | d_model u32
             | context_len u32 | rows K x d f32 | reference rows K x d f32
             | context vectors ctx x d f32 | JSON metadata | footer: u64
             absolute byte offset of the JSON block (last 8 bytes)

Writers are atomic (temp file + rename); readers fail with byte-offset
diagnostics, never partial objects.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import tempfile
from dataclasses import asdict, is_dataclass

import numpy as np

from . import numerics as nm
from .data import FeatureDataset
from .errors import DataError, UsageError
from .prompting import ClassEmbeddingTable, SoftContext, Vocabulary

MAGIC_FEATURES = b"LAMMFEAT"
MAGIC_VOCAB = b"LAMMVOCB"
MAGIC_CHECKPOINT = b"LAMMCKPT"
FORMAT_VERSION = 1

REQUIRED_CHECKPOINT_METADATA = (
    "seed", "shots", "lambdas", "tau", "kd_mode", "init_mode", "encoder_hash",
    "class_names",
)


def _atomic_write(path: str, blob: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


class _Reader:
    """Cursor over file bytes that reports the offset of any shortfall."""

    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise DataError(
                f"{self.path}: truncated while reading {what} at byte offset "
                f"{self.offset}: need {n} bytes, {len(self.blob) - self.offset} remain"
            )
        chunk = self.blob[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def string(self, what: str) -> str:
        length = self.u32(f"{what} length")
        raw = self.take(length, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"{self.path}: invalid UTF-8 in {what}: {e}") from None

    def f32_block(self, count: int, what: str) -> np.ndarray:
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)

    def expect_end(self) -> None:
        if self.offset != len(self.blob):
            raise DataError(
                f"{self.path}: {len(self.blob) - self.offset} trailing bytes "
                f"at byte offset {self.offset}"
            )


def _pack_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _check_magic(reader: _Reader, expected: bytes, kind: str) -> None:
    magic = reader.take(8, "magic")
    if magic != expected:
        raise DataError(
            f"{reader.path}: bad magic {magic!r} (expected {expected!r} for {kind})"
        )
    version = reader.u32("format version")
    if version != FORMAT_VERSION:
        raise DataError(
            f"{reader.path}: unsupported {kind} version {version} "
            f"(supported: {FORMAT_VERSION})"
        )


# --------------------------------------------------------------------------
# FeatureFile
# --------------------------------------------------------------------------

def write_feature_file(path: str, dataset: FeatureDataset) -> None:
    parts = [
        MAGIC_FEATURES,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", dataset.d_feat),
        struct.pack("<Q", dataset.n_items),
        struct.pack("<I", dataset.n_classes),
    ]
    for name in dataset.class_names:
        parts.append(_pack_string(name))
    rec_dtype = np.dtype(
        [("id", "<u8"), ("label", "<u4"), ("feat", "<f4", (dataset.d_feat,))]
    )
    records = np.empty(dataset.n_items, dtype=rec_dtype)
    records["id"] = dataset.item_ids
    records["label"] = dataset.labels.astype(np.uint32)
    records["feat"] = dataset.features.astype(np.float32)
    parts.append(records.tobytes())
    _atomic_write(path, b"".join(parts))


def read_feature_file(path: str) -> FeatureDataset:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    _check_magic(reader, MAGIC_FEATURES, "feature file")
    d_feat = reader.u32("d_feat")
    if d_feat < 1:
        raise DataError(f"{path}: d_feat must be >= 1, got {d_feat}")
    n_items = reader.u64("item count")
    n_classes = reader.u32("category count")
    names = [reader.string(f"category name {i}") for i in range(n_classes)]
    rec_dtype = np.dtype([("id", "<u8"), ("label", "<u4"), ("feat", "<f4", (d_feat,))])
    raw = reader.take(rec_dtype.itemsize * n_items, f"{n_items} feature records")
    reader.expect_end()
    records = np.frombuffer(raw, dtype=rec_dtype)
    labels = records["label"].astype(np.int64)
    if n_items and labels.max() >= n_classes:
        bad = int(np.argmax(labels >= n_classes))
        raise DataError(
            f"{path}: record {bad}: label {labels[bad]} out of range "
            f"(category count {n_classes})"
        )
    return FeatureDataset(
        item_ids=records["id"].astype(np.uint64),
        labels=labels,
        features=records["feat"].astype(np.float64),
        class_names=names,
    )


# --------------------------------------------------------------------------
# VocabFile
# --------------------------------------------------------------------------

def write_vocab_file(path: str, vocab: Vocabulary) -> None:
    parts = [
        MAGIC_VOCAB,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", vocab.vocab_size),
        struct.pack("<I", vocab.d_model),
    ]
    for token in vocab.tokens:
        parts.append(_pack_string(token))
    parts.append(vocab.embeddings.astype("<f4").tobytes())
    _atomic_write(path, b"".join(parts))


def read_vocab_file(path: str) -> Vocabulary:
    with open(path, "rb") as fh:
        reader = _Reader(fh.read(), path)
    _check_magic(reader, MAGIC_VOCAB, "vocabulary file")
    vocab_size = reader.u32("vocab size")
    d_model = reader.u32("d_model")
    tokens = [reader.string(f"token {i}") for i in range(vocab_size)]
    flat = reader.f32_block(vocab_size * d_model, "embedding matrix")
    reader.expect_end()
    try:
        return Vocabulary(tokens, flat.reshape(vocab_size, d_model))
    except UsageError as e:
        raise DataError(f"{path}: {e}") from None


# --------------------------------------------------------------------------
# CheckpointFile
# --------------------------------------------------------------------------

def save_checkpoint(
    path: str,
    table: ClassEmbeddingTable,
    context: SoftContext | None,
    metadata: dict,
) -> None:
    missing = [k for k in REQUIRED_CHECKPOINT_METADATA if k not in metadata]
    if missing:
        raise DataError(f"checkpoint metadata missing keys: {missing}")
    metadata = dict(metadata)
    metadata.setdefault("trainable_mask", [bool(b) for b in table.trainable_mask])
    ctx_len = context.length if context is not None else 0
    parts = [
        MAGIC_CHECKPOINT,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack("<I", table.n_classes),
        struct.pack("<I", table.d_model),
        struct.pack("<I", ctx_len),
        table.rows.data.astype("<f4").tobytes(),
        table.reference_rows.astype("<f4").tobytes(),
    ]
    if context is not None:
        parts.append(context.vectors.data.astype("<f4").tobytes())
    json_offset = sum(len(p) for p in parts)
    parts.append(json.dumps(metadata, sort_keys=True).encode("utf-8"))
    parts.append(struct.pack("<Q", json_offset))
    _atomic_write(path, b"".join(parts))


def load_checkpoint(
    path: str, expected_encoder_hash: str | None = None
) -> tuple[ClassEmbeddingTable, SoftContext | None, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise DataError(f"{path}: too short for a footer offset ({len(blob)} bytes)")
    (json_offset,) = struct.unpack("<Q", blob[-8:])
    if json_offset > len(blob) - 8:
        raise DataError(
            f"{path}: footer points at byte offset {json_offset}, beyond "
            f"end of metadata region ({len(blob) - 8})"
        )
    reader = _Reader(blob[:json_offset], path)
    _check_magic(reader, MAGIC_CHECKPOINT, "checkpoint")
    k = reader.u32("class count")
    d_model = reader.u32("d_model")
    ctx_len = reader.u32("context length")
    rows = reader.f32_block(k * d_model, "trainable rows").reshape(k, d_model)
    refs = reader.f32_block(k * d_model, "reference rows").reshape(k, d_model)
    ctx = None
    if ctx_len:
        ctx = reader.f32_block(ctx_len * d_model, "context vectors")
        ctx = ctx.reshape(ctx_len, d_model)
    reader.expect_end()
    try:
        metadata = json.loads(blob[json_offset:-8].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: invalid metadata JSON: {e}") from None
    missing = [key for key in REQUIRED_CHECKPOINT_METADATA if key not in metadata]
    if missing:
        raise DataError(f"{path}: checkpoint metadata missing keys: {missing}")
    if expected_encoder_hash is not None and metadata["encoder_hash"] != expected_encoder_hash:
        raise DataError(
            f"{path}: checkpoint was written against encoder "
            f"{metadata['encoder_hash'][:12]}..., live encoder is "
            f"{expected_encoder_hash[:12]}..."
        )
    class_names = [str(n) for n in metadata["class_names"]]
    if len(class_names) != k:
        raise DataError(
            f"{path}: metadata lists {len(class_names)} class names for {k} rows"
        )
    mask = np.array(
        metadata.get("trainable_mask", [True] * k), dtype=bool
    )
    try:
        table = ClassEmbeddingTable(
            rows=nm.tensor(rows, requires_grad=True),
            reference_rows=refs,
            class_names=class_names,
            trainable_mask=mask,
        )
    except UsageError as e:
        raise DataError(f"{path}: {e}") from None
    context = None
    if ctx is not None:
        # The init copy is not persisted; a loaded context anchors to itself.
        context = SoftContext(
            vectors=nm.tensor(ctx.copy(), requires_grad=True),
            reference=ctx.copy(),
            trainable=True,
        )
    return table, context, metadata


# --------------------------------------------------------------------------
# validate
# --------------------------------------------------------------------------

def validate(path: str) -> dict:
    """Structural check of any engine file; returns a summary dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise DataError(f"{path}: too short for a magic number ({len(blob)} bytes)")
    magic = blob[:8]
    if magic == MAGIC_FEATURES:
        ds = read_feature_file(path)
        return {
            "kind": "features",
            "version": FORMAT_VERSION,
            "d_feat": ds.d_feat,
            "items": ds.n_items,
            "categories": ds.n_classes,
        }
    if magic == MAGIC_VOCAB:
        vocab = read_vocab_file(path)
        return {
            "kind": "vocabulary",
            "version": FORMAT_VERSION,
            "vocab_size": vocab.vocab_size,
            "d_model": vocab.d_model,
        }
    if magic == MAGIC_CHECKPOINT:
        table, context, metadata = load_checkpoint(path)
        return {
            "kind": "checkpoint",
            "version": FORMAT_VERSION,
            "classes": table.n_classes,
            "d_model": table.d_model,
            "context_len": context.length if context is not None else 0,
            "encoder_hash": metadata["encoder_hash"],
        }
    raise DataError(f"{path}: unrecognized magic {magic!r}")


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

def _plain(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _plain(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_json_report(path: str, obj) -> None:
    blob = json.dumps(_plain(obj), indent=2, sort_keys=True).encode("utf-8")
    _atomic_write(path, blob + b"\n")


def write_trace_csv(path: str, trace) -> None:
    rows = []
    for rec in trace.steps:
        rows.append([
            rec.step, rec.epoch,
            rec.loss.ce, rec.loss.wc, rec.loss.cos, rec.loss.kd, rec.loss.total,
            rec.lr,
        ])
    _write_csv(path, ["step", "epoch", "ce", "wc", "cos", "kd", "total", "lr"], rows)


def write_sweep_csv(path: str, sweep_rows) -> None:
    rows = []
    for row in sweep_rows:
        for seed, acc in sorted(row.seed_accuracies.items()):
            rows.append([row.shots, seed, acc])
        rows.append([row.shots, "mean", row.mean_accuracy])
    _write_csv(path, ["shots", "seed", "accuracy"], rows)


def _write_csv(path: str, header, rows) -> None:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    _atomic_write(path, buf.getvalue().encode("utf-8"))
