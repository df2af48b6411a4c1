"""Few-shot sampling and the SGD-with-momentum tuning loop.

A run samples n items per class, caches the frozen reference features and
cosines once, then optimizes the class rows (and optional context) with
cosine-decayed SGD. Everything is keyed off explicit seeds: identical
configs give bitwise-identical tables.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import FeatureDataset, ImageFeatureProvider
from .encoders import ModelConfig, TextEncoderParams, encode_text
from .errors import DataError, NumericError, UsageError
from .losses import (
    CosineBatch,
    KD_MODES,
    LossBreakdown,
    LossWeights,
    ce_loss,
    cos_loss,
    kd_loss,
    total_loss,
    wc_loss,
)
from .prompting import (
    DEFAULT_TEMPLATE,
    ClassEmbeddingTable,
    SoftContext,
    Vocabulary,
    build_prompt,
    build_reference_prompt,
    init_context,
    init_table,
)


@dataclass
class FewShotSplit:
    """Per-class train ids (exactly n each) and the complement as test ids."""

    train_ids: list[np.ndarray]
    test_ids: np.ndarray
    shots: int
    seed: int

    def all_train_ids(self) -> np.ndarray:
        return np.concatenate(self.train_ids) if self.train_ids else np.array([], dtype=np.uint64)


def sample_few_shot(dataset: FeatureDataset, n: int, seed: int) -> FewShotSplit:
    """Seeded per-class sampling without replacement; test = complement."""
    if n < 1:
        raise UsageError(f"shots must be >= 1, got {n}")
    train_ids = []
    test_parts = []
    for c in range(dataset.n_classes):
        ids = dataset.ids_for_class(c)
        if ids.shape[0] < n:
            raise DataError(
                f"class {dataset.class_names[c]!r} has {ids.shape[0]} items, "
                f"need {n} for {n}-shot training"
            )
        rng = np.random.default_rng(np.random.SeedSequence([seed, c, 0xF5]))
        pick = rng.choice(ids.shape[0], size=n, replace=False)
        pick = np.sort(pick)
        train_ids.append(ids[pick])
        mask = np.ones(ids.shape[0], dtype=bool)
        mask[pick] = False
        test_parts.append(ids[mask])
    test_ids = np.concatenate(test_parts) if test_parts else np.array([], dtype=np.uint64)
    return FewShotSplit(train_ids=train_ids, test_ids=test_ids, shots=n, seed=seed)


@dataclass(frozen=True)
class TrainConfig:
    shots: int
    seed: int
    epochs: int = 50
    batch_size: int | None = None     # None resolves to min(32, K * shots)
    lr: float = 0.002
    momentum: float = 0.9
    weights: LossWeights | None = None
    kd_mode: str = "literal"
    init_mode: str = "word"
    context_len: int = 0              # 0 disables the soft context
    template: str = DEFAULT_TEMPLATE

    def __post_init__(self):
        if self.shots < 1:
            raise UsageError(f"shots must be >= 1, got {self.shots}")
        if self.epochs < 1:
            raise UsageError(f"epochs must be >= 1, got {self.epochs}")
        # lr == 0 is allowed: it is the documented no-op update.
        if self.lr < 0:
            raise UsageError(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.momentum < 1):
            raise UsageError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.kd_mode not in KD_MODES:
            raise UsageError(f"kd_mode must be one of {KD_MODES}, got {self.kd_mode!r}")
        if self.init_mode not in ("word", "random"):
            raise UsageError(f"init_mode must be word or random, got {self.init_mode!r}")
        if self.context_len < 0:
            raise UsageError("context_len must be >= 0")
        if self.batch_size is not None and self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")

    def resolved_weights(self) -> LossWeights:
        return self.weights if self.weights is not None else LossWeights(shots=self.shots)

    def resolved_batch_size(self, n_train: int) -> int:
        if self.batch_size is not None:
            return min(self.batch_size, n_train)
        return min(32, n_train)


@dataclass(frozen=True)
class StepRecord:
    step: int
    epoch: int
    lr: float
    loss: LossBreakdown


@dataclass
class TrainTrace:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_train_accuracy: list[float] = field(default_factory=list)
    wall_clock_seconds: float = 0.0


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """base_lr * (1 + cos(pi * step / total_steps)) / 2."""
    if total_steps < 1:
        raise UsageError("total_steps must be >= 1")
    return base_lr * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


@dataclass
class OptimizerState:
    momentum: float
    velocities: list[np.ndarray]

    @classmethod
    def for_params(cls, params, momentum: float) -> "OptimizerState":
        return cls(momentum=momentum, velocities=[np.zeros_like(p.data) for p in params])


def optimizer_step(
    params: list[nm.DenseTensor],
    grads: list[np.ndarray],
    state: OptimizerState,
    lr_t: float,
) -> None:
    """Classic momentum: v <- mu*v + g; theta <- theta - lr_t*v. In place."""
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise UsageError("params, grads and state lengths differ")
    for p, g, v in zip(params, grads, state.velocities):
        if g.shape != p.data.shape:
            raise UsageError(f"grad shape {g.shape} does not match param {p.data.shape}")
        v *= state.momentum
        v += g
        p.data -= lr_t * v


def reference_text_features(
    vocab: Vocabulary,
    enc: TextEncoderParams,
    class_names,
    template: str = DEFAULT_TEMPLATE,
) -> np.ndarray:
    """Frozen features of the reference prompts y_i, one unit row per class."""
    rows = []
    for name in class_names:
        seq = build_reference_prompt(vocab, name, template, max_len=enc.config.max_seq_len)
        rows.append(encode_text(enc, seq).data)
    return np.stack(rows, axis=0)


def tuned_text_features(
    vocab: Vocabulary,
    enc: TextEncoderParams,
    table: ClassEmbeddingTable,
    context: SoftContext | None = None,
    template: str = DEFAULT_TEMPLATE,
) -> np.ndarray:
    """Current features of the tuned prompts, outside any tape."""
    rows = []
    for i in range(table.n_classes):
        seq = build_prompt(
            vocab, table, i, context, template, max_len=enc.config.max_seq_len
        )
        rows.append(encode_text(enc, seq).data)
    return np.stack(rows, axis=0)


def train(
    dataset: FeatureDataset,
    vocab: Vocabulary,
    enc: TextEncoderParams,
    model_config: ModelConfig,
    config: TrainConfig,
    table: ClassEmbeddingTable | None = None,
    context: SoftContext | None = None,
    split: FewShotSplit | None = None,
    class_subset: list[int] | None = None,
) -> tuple[ClassEmbeddingTable, SoftContext | None, TrainTrace]:
    """Optimize the trainable rows (and context) on a few-shot split.

    `class_subset` restricts sampling to those label values while the
    softmax still runs over every row of the table; this is how the
    incremental phase trains on new classes only. The encoder and
    vocabulary are read-only throughout (hashes asserted).
    """
    t0 = time.monotonic()
    enc_hash_before = enc.content_hash()
    vocab_hash_before = vocab.content_hash()

    if table is None:
        table = init_table(vocab, dataset.class_names, config.init_mode, config.seed)
    if table.n_classes < len(dataset.class_names):
        raise UsageError("table has fewer rows than the dataset has classes")
    if config.context_len > 0 and context is None:
        context = init_context(vocab, config.context_len, config.seed)
    if split is None:
        if class_subset is None:
            split = sample_few_shot(dataset, config.shots, config.seed)
        else:
            sub = dataset.restrict_to_classes(class_subset)
            sub_split = sample_few_shot(sub, config.shots, config.seed)
            split = FewShotSplit(
                train_ids=sub_split.train_ids,
                test_ids=sub_split.test_ids,
                shots=config.shots,
                seed=config.seed,
            )

    provider = ImageFeatureProvider(dataset)
    train_ids = split.all_train_ids()
    if train_ids.shape[0] == 0:
        raise UsageError("empty training split")
    feats = provider.get_many(train_ids)
    labels = np.array(
        [dataset.labels[dataset.position_of(i)] for i in train_ids.tolist()],
        dtype=np.int64,
    )

    k = table.n_classes
    template = config.template
    teacher_feats = reference_text_features(vocab, enc, table.class_names, template)
    teacher_cos = feats @ teacher_feats.T

    weights = config.resolved_weights()
    tau = model_config.tau
    n_train = train_ids.shape[0]
    batch_size = config.resolved_batch_size(n_train)
    steps_per_epoch = (n_train + batch_size - 1) // batch_size
    total_steps = config.epochs * steps_per_epoch

    params: list[nm.DenseTensor] = []
    if any(table.trainable_mask):
        params.append(table.rows)
    if context is not None and context.trainable:
        params.append(context.vectors)
    state = OptimizerState.for_params(params, config.momentum)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE9]))
    trace = TrainTrace()
    step = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n_train)
        for start in range(0, n_train, batch_size):
            idx = perm[start:start + batch_size]
            batch_feats = feats[idx]
            batch_labels = labels[idx]
            batch_teacher = teacher_cos[idx]

            with nm.Tape() as tape:
                student = [
                    encode_text(
                        enc,
                        build_prompt(vocab, table, i, context, template,
                                     max_len=enc.config.max_seq_len),
                    )
                    for i in range(k)
                ]
                stacked = nm.stack_rows(student)
                scores = nm.matmul(nm.constant(batch_feats), nm.transpose(stacked))
                ce = ce_loss(scores, batch_labels, tau)
                wc = wc_loss(table, context)
                cos = cos_loss(student, teacher_feats)
                kd = kd_loss(CosineBatch(scores, batch_teacher), config.kd_mode, tau)
                total, breakdown = total_loss(ce, wc, cos, kd, weights)
                if not breakdown.is_finite():
                    bad = breakdown.nonfinite_terms()
                    if bad == ["total"]:
                        # finite terms whose weighted contribution overflowed
                        contrib = {
                            "wc": weights.l1 * breakdown.wc,
                            "cos": weights.l2 * breakdown.cos,
                            "kd": weights.l3 * breakdown.kd,
                        }
                        bad = [k for k, v in contrib.items()
                               if not math.isfinite(v)] + bad
                    raise NumericError(
                        f"training aborted at step {step}: "
                        f"non-finite loss term(s): {', '.join(bad)}"
                    )
                for p in params:
                    p.zero_grad()
                tape.backward(total)

            grads = [
                p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in params
            ]
            lr_t = cosine_lr(config.lr, step, total_steps)
            optimizer_step(params, grads, state, lr_t)
            trace.steps.append(StepRecord(step=step, epoch=epoch, lr=lr_t, loss=breakdown))
            step += 1

        text_feats = tuned_text_features(vocab, enc, table, context, template)
        pred = np.argmax(feats @ text_feats.T, axis=1)
        trace.epoch_train_accuracy.append(float(np.mean(pred == labels)))

    if enc.content_hash() != enc_hash_before:
        raise NumericError("encoder parameters changed during training")
    if vocab.content_hash() != vocab_hash_before:
        raise NumericError("vocabulary embeddings changed during training")
    trace.wall_clock_seconds = time.monotonic() - t0
    return table, context, trace
