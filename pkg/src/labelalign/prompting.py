"""Prompt assembly: vocabulary, trainable class rows, and soft context.

Three prompt shapes matter here. The reference prompt y_i spells the
category with its original word embeddings inside the fixed template. The
tuned prompt z_i swaps the category word for one trainable row M_i. The
context variant z*_i drops the template and prepends shared trainable
context vectors: [V_1..V_M][M_i].
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import DataError, UsageError

DEFAULT_TEMPLATE = "a photo of <CLASS> ."
CLASS_PLACEHOLDER = "<CLASS>"
TEMPLATE_WORDS = ("a", "photo", "of", ".")
DEFAULT_MAX_LEN = 16
INIT_STD = 0.02


class Vocabulary:
    """Whitespace tokens mapped to frozen d_model embedding rows."""

    def __init__(self, tokens: list[str], embeddings: np.ndarray):
        if len(set(tokens)) != len(tokens):
            raise UsageError("duplicate tokens in vocabulary")
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.shape[0] != len(tokens):
            raise DataError(
                f"embedding matrix has {embeddings.shape[0]} rows "
                f"for {len(tokens)} tokens"
            )
        self.tokens = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        self.embeddings = embeddings
        self.embeddings.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def d_model(self) -> int:
        return int(self.embeddings.shape[1])

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word not in self.token_to_id:
                raise DataError(f"token not in vocabulary: {word!r}")
            ids.append(self.token_to_id[word])
        return ids

    def embedding_of(self, token_id: int) -> np.ndarray:
        return self.embeddings[token_id]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.tokens:
            h.update(t.encode("utf-8"))
            h.update(b"\x00")
        h.update(np.ascontiguousarray(self.embeddings).tobytes())
        return h.hexdigest()


def build_synthetic_vocab(words, d_model: int, seed: int) -> Vocabulary:
    """Template words plus the given words, rows from Gaussian(0, 0.02)."""
    tokens = list(TEMPLATE_WORDS)
    seen = set(tokens)
    for w in words:
        for part in str(w).split():
            if part not in seen:
                tokens.append(part)
                seen.add(part)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70CB]))
    emb = rng.standard_normal((len(tokens), d_model)) * INIT_STD
    return Vocabulary(tokens, emb)


@dataclass
class ClassEmbeddingTable:
    """K trainable rows plus the frozen reference copy taken at init.

    rows is the live parameter tensor; reference_rows never changes and
    anchors the weight-consolidation loss. Rows whose trainable_mask entry
    is false are assembled as constants, so they receive no gradient and
    stay bitwise-fixed through training.
    """

    rows: nm.DenseTensor
    reference_rows: np.ndarray
    class_names: list[str]
    trainable_mask: np.ndarray

    def __post_init__(self):
        if self.rows.data.shape != self.reference_rows.shape:
            raise UsageError("rows and reference_rows shapes differ")
        if len(self.class_names) != self.rows.data.shape[0]:
            raise UsageError("class_names length does not match row count")
        if self.trainable_mask.shape != (self.rows.data.shape[0],):
            raise UsageError("trainable_mask length does not match row count")
        self.reference_rows.setflags(write=False)

    @property
    def n_classes(self) -> int:
        return int(self.rows.data.shape[0])

    @property
    def d_model(self) -> int:
        return int(self.rows.data.shape[1])

    def trainable_indices(self) -> list[int]:
        return [i for i in range(self.n_classes) if self.trainable_mask[i]]

    def reference_hash(self) -> str:
        return hashlib.sha256(
            np.ascontiguousarray(self.reference_rows).tobytes()
        ).hexdigest()

    def class_row(self, i: int) -> nm.DenseTensor:
        """Row i for assembly: live (differentiable) if trainable, else constant."""
        if self.trainable_mask[i]:
            return nm.take_row(self.rows, i)
        return nm.constant(self.rows.data[i])


@dataclass
class SoftContext:
    """M shared context vectors V_1..V_M, plus their init copy."""

    vectors: nm.DenseTensor
    reference: np.ndarray
    trainable: bool = True

    def __post_init__(self):
        if self.vectors.data.shape != self.reference.shape:
            raise UsageError("context vectors and reference shapes differ")
        self.reference.setflags(write=False)

    @property
    def length(self) -> int:
        return int(self.vectors.data.shape[0])

    def context_row(self, j: int) -> nm.DenseTensor:
        if self.trainable:
            return nm.take_row(self.vectors, j)
        return nm.constant(self.vectors.data[j])


# Slot kinds inside a PromptSequence.
VOCAB_SLOT = "frozen-vocab"
CLASS_SLOT = "class-slot"
CONTEXT_SLOT = "context-slot"


@dataclass(frozen=True)
class Slot:
    kind: str
    index: int = -1          # class index or context position, kind-dependent
    token: str = ""          # token string for vocab slots (debugging aid)


@dataclass
class PromptSequence:
    """Ordered embedding slots plus the live objects that resolve them."""

    slots: list[Slot]
    vocab: Vocabulary
    table: ClassEmbeddingTable | None = None
    context: SoftContext | None = None

    def __len__(self) -> int:
        return len(self.slots)

    def assemble(self) -> nm.DenseTensor:
        """Stack the slot embeddings into an (L, d_model) tensor.

        Vocab slots become constants; class and context slots pull the
        current rows so gradients reach exactly the trainable leaves.
        """
        rows = []
        for slot in self.slots:
            if slot.kind == VOCAB_SLOT:
                rows.append(nm.constant(self.vocab.embeddings[slot.index]))
            elif slot.kind == CLASS_SLOT:
                if self.table is None:
                    raise UsageError("class slot present but no table attached")
                rows.append(self.table.class_row(slot.index))
            elif slot.kind == CONTEXT_SLOT:
                if self.context is None:
                    raise UsageError("context slot present but no context attached")
                rows.append(self.context.context_row(slot.index))
            else:
                raise UsageError(f"unknown slot kind {slot.kind!r}")
        return nm.stack_rows(rows)


def _template_parts(template: str) -> list[str]:
    parts = template.split()
    if not parts:
        raise UsageError("empty prompt template")
    if parts.count(CLASS_PLACEHOLDER) != 1:
        raise UsageError(
            f"template must contain {CLASS_PLACEHOLDER} exactly once: {template!r}"
        )
    return parts


def build_reference_prompt(
    vocab: Vocabulary,
    class_name: str,
    template: str = DEFAULT_TEMPLATE,
    max_len: int = DEFAULT_MAX_LEN,
) -> PromptSequence:
    """y_i: the template with the category's own word embeddings, all frozen."""
    slots = []
    for part in _template_parts(template):
        if part == CLASS_PLACEHOLDER:
            for tid in vocab.tokenize(class_name):
                slots.append(Slot(VOCAB_SLOT, index=tid, token=vocab.tokens[tid]))
        else:
            tid = vocab.tokenize(part)[0]
            slots.append(Slot(VOCAB_SLOT, index=tid, token=part))
    if len(slots) > max_len:
        raise UsageError(
            f"prompt length {len(slots)} exceeds max length {max_len}"
        )
    return PromptSequence(slots=slots, vocab=vocab)


def build_prompt(
    vocab: Vocabulary,
    table: ClassEmbeddingTable,
    class_index: int,
    context: SoftContext | None = None,
    template: str = DEFAULT_TEMPLATE,
    max_len: int = DEFAULT_MAX_LEN,
) -> PromptSequence:
    """z_i (template with trainable M_i) or z*_i ([V_1..V_M][M_i])."""
    if not (0 <= class_index < table.n_classes):
        raise UsageError(
            f"class index {class_index} out of range for {table.n_classes} classes"
        )
    slots = []
    if context is not None:
        for j in range(context.length):
            slots.append(Slot(CONTEXT_SLOT, index=j))
        slots.append(Slot(CLASS_SLOT, index=class_index))
    else:
        for part in _template_parts(template):
            if part == CLASS_PLACEHOLDER:
                slots.append(Slot(CLASS_SLOT, index=class_index))
            else:
                tid = vocab.tokenize(part)[0]
                slots.append(Slot(VOCAB_SLOT, index=tid, token=part))
    if len(slots) > max_len:
        raise UsageError(f"prompt length {len(slots)} exceeds max length {max_len}")
    return PromptSequence(slots=slots, vocab=vocab, table=table, context=context)


def _word_init_rows(vocab: Vocabulary, class_names) -> np.ndarray:
    rows = []
    for name in class_names:
        ids = vocab.tokenize(name)
        if not ids:
            raise DataError(f"class name tokenizes to nothing: {name!r}")
        rows.append(vocab.embeddings[ids].mean(axis=0))
    return np.stack(rows, axis=0)


def init_table(
    vocab: Vocabulary, class_names, mode: str = "word", seed: int = 0
) -> ClassEmbeddingTable:
    """Create the trainable table; reference_rows is a copy of the init.

    word mode: row_i = mean of the category-name token embeddings.
    random mode: rows from seeded Gaussian(0, 0.02).
    """
    class_names = [str(n) for n in class_names]
    if len(set(class_names)) != len(class_names):
        raise UsageError("duplicate class names")
    if mode == "word":
        rows = _word_init_rows(vocab, class_names)
    elif mode == "random":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1AB1E]))
        rows = rng.standard_normal((len(class_names), vocab.d_model)) * INIT_STD
    else:
        raise UsageError(f"unknown init mode {mode!r} (expected word or random)")
    return ClassEmbeddingTable(
        rows=nm.tensor(rows.copy(), requires_grad=True),
        reference_rows=rows.copy(),
        class_names=class_names,
        trainable_mask=np.ones(len(class_names), dtype=bool),
    )


def extend_table(
    table: ClassEmbeddingTable,
    new_class_names,
    vocab: Vocabulary,
    mode: str = "word",
    seed: int = 0,
    freeze_existing: bool = True,
) -> ClassEmbeddingTable:
    """Append rows for new classes; the original rows stay bitwise intact.

    With freeze_existing (the incremental protocol) the old rows are marked
    non-trainable, so later training can only move the new rows.
    """
    new_class_names = [str(n) for n in new_class_names]
    overlap = set(new_class_names) & set(table.class_names)
    if overlap:
        raise UsageError(f"class names already present: {sorted(overlap)}")
    if len(set(new_class_names)) != len(new_class_names):
        raise UsageError("duplicate names in new_class_names")
    sub = init_table(vocab, new_class_names, mode=mode, seed=seed)
    rows = np.concatenate([table.rows.data, sub.rows.data], axis=0)
    refs = np.concatenate([table.reference_rows, sub.reference_rows], axis=0)
    old_mask = (
        np.zeros(table.n_classes, dtype=bool) if freeze_existing
        else table.trainable_mask.copy()
    )
    mask = np.concatenate([old_mask, np.ones(len(new_class_names), dtype=bool)])
    return ClassEmbeddingTable(
        rows=nm.tensor(rows, requires_grad=True),
        reference_rows=refs,
        class_names=table.class_names + new_class_names,
        trainable_mask=mask,
    )


def init_context(vocab: Vocabulary, length: int = 4, seed: int = 0) -> SoftContext:
    """Context vectors seeded from "a photo of", Gaussian-padded past 3."""
    if length < 1:
        raise UsageError("context length must be >= 1")
    base_words = ["a", "photo", "of"]
    rows = []
    for w in base_words[:length]:
        rows.append(vocab.embeddings[vocab.tokenize(w)[0]].copy())
    if length > len(base_words):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC047E]))
        extra = rng.standard_normal((length - len(base_words), vocab.d_model))
        rows.extend(list(extra * INIT_STD))
    vecs = np.stack(rows, axis=0)
    return SoftContext(
        vectors=nm.tensor(vecs.copy(), requires_grad=True),
        reference=vecs.copy(),
        trainable=True,
    )
