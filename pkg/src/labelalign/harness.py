"""Evaluation and experiment protocols over the tuning engine.

Everything here is deterministic plumbing: accuracy evaluation with fixed
tie-breaking, the zero-shot baseline, few-shot sweeps over shots and
seeds, loss ablations, the two-phase class-incremental protocol, and
domain-shift evaluation against an alternate feature set. The synthetic
suite builder also lives here because its aligned modes need the text
encoder's reference features.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nm
from .data import FeatureDataset, ImageFeatureProvider
from .encoders import (
    ModelConfig,
    TextEncoderParams,
    init_text_encoder,
    make_synthetic_dataset,
    sphere_means,
)
from .errors import DataError, UsageError
from .prompting import (
    DEFAULT_TEMPLATE,
    ClassEmbeddingTable,
    SoftContext,
    Vocabulary,
    build_synthetic_vocab,
    extend_table,
    init_context,
    init_table,
)
from .training import (
    FewShotSplit,
    TrainConfig,
    TrainTrace,
    reference_text_features,
    sample_few_shot,
    train,
    tuned_text_features,
)

ALIGN_MODES = ("random", "matched", "rotated")


@dataclass
class EvalReport:
    accuracy: float
    per_class: dict[str, float]
    n_evaluated: int
    config_fingerprint: str
    seeds: list[int] = field(default_factory=list)


@dataclass
class IncrementalReport:
    acc_set1_before: float
    acc_set2: float
    acc_set1_after: float
    degradation: float
    set1_rows_unchanged: bool
    mode: str
    joint_softmax: bool


@dataclass
class AblationGrid:
    """CE is always on; each combo toggles the three regularizers."""

    combos: list[tuple[bool, bool, bool]] = field(
        default_factory=lambda: list(itertools.product((False, True), repeat=3))
    )


@dataclass
class AblationRow:
    wc: bool
    cos: bool
    kd: bool
    seed_accuracies: dict[int, float]
    mean_accuracy: float


@dataclass
class SweepRow:
    shots: int
    seed_accuracies: dict[int, float]
    mean_accuracy: float


def _fingerprint(vocab: Vocabulary, enc: TextEncoderParams, class_names, template: str) -> str:
    payload = json.dumps(
        {
            "encoder": enc.content_hash(),
            "vocab": vocab.content_hash(),
            "tau": enc.config.tau,
            "classes": list(class_names),
            "template": template,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _score_and_report(
    dataset: FeatureDataset,
    text_feats: np.ndarray,
    item_ids,
    fingerprint: str,
    seeds: list[int],
) -> EvalReport:
    if item_ids is None:
        item_ids = dataset.item_ids
    item_ids = np.asarray(item_ids, dtype=np.uint64)
    if item_ids.shape[0] == 0:
        raise UsageError("empty evaluation split")
    provider = ImageFeatureProvider(dataset)
    feats = provider.get_many(item_ids)
    labels = np.array(
        [dataset.labels[dataset.position_of(i)] for i in item_ids.tolist()],
        dtype=np.int64,
    )
    scores = feats @ text_feats.T
    pred = np.argmax(scores, axis=1)  # first max wins: lowest class index
    correct = pred == labels
    per_class: dict[str, float] = {}
    for c in np.unique(labels):
        mask = labels == c
        per_class[dataset.class_names[int(c)]] = float(np.mean(correct[mask]))
    return EvalReport(
        accuracy=float(np.mean(correct)),
        per_class=per_class,
        n_evaluated=int(item_ids.shape[0]),
        config_fingerprint=fingerprint,
        seeds=list(seeds),
    )


def evaluate(
    dataset: FeatureDataset,
    vocab: Vocabulary,
    enc: TextEncoderParams,
    table: ClassEmbeddingTable,
    context: SoftContext | None = None,
    item_ids=None,
    template: str = DEFAULT_TEMPLATE,
    seeds: list[int] | None = None,
) -> EvalReport:
    """Top-1 accuracy of the tuned prompts over the given items."""
    if table.n_classes != len(dataset.class_names):
        raise DataError(
            f"table has {table.n_classes} rows but dataset declares "
            f"{len(dataset.class_names)} categories"
        )
    text_feats = tuned_text_features(vocab, enc, table, context, template)
    fp = _fingerprint(vocab, enc, table.class_names, template)
    return _score_and_report(dataset, text_feats, item_ids, fp, seeds or [])


def zero_shot_eval(
    dataset: FeatureDataset,
    vocab: Vocabulary,
    enc: TextEncoderParams,
    item_ids=None,
    template: str = DEFAULT_TEMPLATE,
) -> EvalReport:
    """Baseline accuracy from the reference prompts; nothing trainable."""
    text_feats = reference_text_features(vocab, enc, dataset.class_names, template)
    fp = _fingerprint(vocab, enc, dataset.class_names, template)
    return _score_and_report(dataset, text_feats, item_ids, fp, [])


def few_shot_sweep(
    dataset: FeatureDataset,
    vocab: Vocabulary,
    enc: TextEncoderParams,
    model_config: ModelConfig,
    base_config: TrainConfig,
    shots=(1, 2, 4, 8, 16),
    seeds=(1, 2, 3),
) -> list[SweepRow]:
    """train + evaluate per (shot, seed); rows in deterministic order."""
    rows = []
    for n in shots:
        per_seed: dict[int, float] = {}
        for seed in seeds:
            config = replace(base_config, shots=n, seed=seed)
            split = sample_few_shot(dataset, n, seed)
            table, context, _ = train(
                dataset, vocab, enc, model_config, config, split=split
            )
            report = evaluate(
                dataset, vocab, enc, table, context,
                item_ids=split.test_ids, template=config.template, seeds=[seed],
            )
            per_seed[seed] = report.accuracy
        mean = sum(per_seed.values()) / len(per_seed)
        rows.append(SweepRow(shots=n, seed_accuracies=per_seed, mean_accuracy=mean))
    return rows


def run_ablation(
    dataset: FeatureDataset,
    vocab: Vocabulary,
    enc: TextEncoderParams,
    model_config: ModelConfig,
    base_config: TrainConfig,
    grid: AblationGrid | None = None,
    seeds=(1, 2, 3),
) -> list[AblationRow]:
    """One train+evaluate per regularizer combination, same seeds each."""
    from .losses import LossWeights

    grid = grid or AblationGrid()
    base_weights = base_config.resolved_weights()
    rows = []
    for wc_on, cos_on, kd_on in grid.combos:
        weights = LossWeights(
            shots=base_config.shots,
            lambda1=base_weights.l1 if wc_on else 0.0,
            lambda2=base_weights.l2 if cos_on else 0.0,
            lambda3=base_weights.l3 if kd_on else 0.0,
        )
        per_seed: dict[int, float] = {}
        for seed in seeds:
            config = replace(base_config, seed=seed, weights=weights)
            split = sample_few_shot(dataset, config.shots, seed)
            table, context, _ = train(
                dataset, vocab, enc, model_config, config, split=split
            )
            report = evaluate(
                dataset, vocab, enc, table, context,
                item_ids=split.test_ids, template=config.template, seeds=[seed],
            )
            per_seed[seed] = report.accuracy
        mean = sum(per_seed.values()) / len(per_seed)
        rows.append(AblationRow(
            wc=wc_on, cos=cos_on, kd=kd_on,
            seed_accuracies=per_seed, mean_accuracy=mean,
        ))
    return rows


def _subtable(table: ClassEmbeddingTable, start: int, stop: int) -> ClassEmbeddingTable:
    """Frozen row slice of a table, for per-set evaluation."""
    return ClassEmbeddingTable(
        rows=nm.tensor(table.rows.data[start:stop].copy()),
        reference_rows=table.reference_rows[start:stop].copy(),
        class_names=table.class_names[start:stop],
        trainable_mask=np.zeros(stop - start, dtype=bool),
    )


def run_incremental(
    dataset: FeatureDataset,
    vocab: Vocabulary,
    enc: TextEncoderParams,
    model_config: ModelConfig,
    config: TrainConfig,
    mode: str = "lamm",
    set1_classes: list[int] | None = None,
    set2_classes: list[int] | None = None,
    joint_softmax: bool = False,
) -> IncrementalReport:
    """Two-phase protocol: train Set1, extend, train Set2, re-measure Set1.

    lamm mode trains per-class rows and freezes Set1 rows in phase 2, so
    Set1 accuracy cannot move. context-only mode keeps every row frozen at
    word init and trains only the shared context vectors, the
    configuration that does forget.
    """
    if mode not in ("lamm", "context-only"):
        raise UsageError(f"unknown incremental mode {mode!r}")
    k = dataset.n_classes
    if k < 2:
        raise UsageError("incremental protocol needs at least 2 classes")
    if set1_classes is None and set2_classes is None:
        k1 = math.ceil(k / 2)
        set1_classes = list(range(k1))
        set2_classes = list(range(k1, k))
    if set1_classes is None or set2_classes is None:
        raise UsageError("provide both class sets or neither")
    if set(set1_classes) & set(set2_classes):
        raise UsageError("Set1 and Set2 classes overlap")
    k1, k2 = len(set1_classes), len(set2_classes)
    if k1 == 0 or k2 == 0:
        raise UsageError("both class sets must be non-empty")

    ds1 = dataset.restrict_to_classes(set1_classes)
    ds2 = dataset.restrict_to_classes(set2_classes)
    ds_all = dataset.restrict_to_classes(list(set1_classes) + list(set2_classes))
    template = config.template

    table1 = init_table(vocab, ds1.class_names, config.init_mode, config.seed)
    if mode == "context-only":
        table1.trainable_mask[:] = False
        ctx_len = config.context_len if config.context_len > 0 else 4
        context = init_context(vocab, ctx_len, config.seed)
    else:
        # Pure row tuning: make sure train() cannot invent a context.
        config = replace(config, context_len=0)
        context = None

    split1 = sample_few_shot(ds1, config.shots, config.seed)
    table1, context, _ = train(
        ds1, vocab, enc, model_config, config,
        table=table1, context=context, split=split1,
    )
    acc_set1_before = evaluate(
        ds1, vocab, enc, table1, context,
        item_ids=split1.test_ids, template=template, seeds=[config.seed],
    ).accuracy

    table2 = extend_table(
        table1, ds2.class_names, vocab, config.init_mode, config.seed,
        freeze_existing=True,
    )
    if mode == "context-only":
        table2.trainable_mask[:] = False
    rows_before = table2.rows.data[:k1].copy()

    split2_local = sample_few_shot(ds2, config.shots, config.seed)
    split2 = FewShotSplit(
        train_ids=split2_local.train_ids,
        test_ids=split2_local.test_ids,
        shots=config.shots,
        seed=config.seed,
    )
    table2, context, _ = train(
        ds_all, vocab, enc, model_config, config,
        table=table2, context=context, split=split2,
    )
    rows_unchanged = bool(np.array_equal(rows_before, table2.rows.data[:k1]))

    if joint_softmax:
        acc_set1_after = evaluate(
            ds_all, vocab, enc, table2, context,
            item_ids=split1.test_ids, template=template, seeds=[config.seed],
        ).accuracy
        acc_set2 = evaluate(
            ds_all, vocab, enc, table2, context,
            item_ids=split2.test_ids, template=template, seeds=[config.seed],
        ).accuracy
    else:
        acc_set1_after = evaluate(
            ds1, vocab, enc, _subtable(table2, 0, k1), context,
            item_ids=split1.test_ids, template=template, seeds=[config.seed],
        ).accuracy
        acc_set2 = evaluate(
            ds2, vocab, enc, _subtable(table2, k1, k1 + k2), context,
            item_ids=split2.test_ids, template=template, seeds=[config.seed],
        ).accuracy

    return IncrementalReport(
        acc_set1_before=acc_set1_before,
        acc_set2=acc_set2,
        acc_set1_after=acc_set1_after,
        degradation=acc_set1_before - acc_set1_after,
        set1_rows_unchanged=rows_unchanged,
        mode=mode,
        joint_softmax=joint_softmax,
    )


def domain_shift_eval(
    alt_dataset: FeatureDataset,
    vocab: Vocabulary,
    enc: TextEncoderParams,
    table: ClassEmbeddingTable,
    context: SoftContext | None = None,
    template: str = DEFAULT_TEMPLATE,
) -> EvalReport:
    """Evaluate a trained table against an alternate feature distribution."""
    if list(alt_dataset.class_names) != list(table.class_names):
        raise DataError(
            "alternate feature set declares a different category list"
        )
    if alt_dataset.d_feat != enc.config.d_feat:
        raise DataError(
            f"alternate d_feat {alt_dataset.d_feat} does not match encoder "
            f"d_feat {enc.config.d_feat}"
        )
    return evaluate(alt_dataset, vocab, enc, table, context, template=template)


@dataclass
class SyntheticSuite:
    dataset: FeatureDataset
    vocab: Vocabulary
    enc: TextEncoderParams
    means: np.ndarray
    align: str


def build_synthetic_suite(
    n_classes: int,
    items_per_class: int,
    model_config: ModelConfig,
    seed: int,
    sigma: float = 0.25,
    align: str = "random",
    class_names: list[str] | None = None,
    noise_seed: int | None = None,
) -> SyntheticSuite:
    """Vocabulary + encoder + a feature set whose means follow `align`.

    random: means uniform on the sphere, unrelated to the text side.
    matched: mean_i = the normalized differential of class i's reference
    text feature (t_i minus the across-class mean feature), so zero-shot
    is a good teacher. rotated: mean_i = the differential of class
    (i+1) mod K, so zero-shot systematically picks the wrong neighbor
    while a perfect on-manifold assignment still exists (swap each row to
    the neighbor's word embedding).

    Differentials rather than raw features because argmax scoring is
    invariant to the component every class shares: the toy encoder's raw
    features sit in a narrow cone around the template direction, and only
    the per-class differential carries label information.
    """
    if align not in ALIGN_MODES:
        raise UsageError(f"align must be one of {ALIGN_MODES}, got {align!r}")
    if class_names is None:
        class_names = [f"class{i:02d}" for i in range(n_classes)]
    vocab = build_synthetic_vocab(class_names, model_config.d_model, model_config.seed)
    enc = init_text_encoder(model_config)
    d_feat = model_config.d_feat
    if align == "random":
        means = sphere_means(n_classes, d_feat, seed)
    else:
        t_feats = reference_text_features(vocab, enc, class_names)
        delta = t_feats - t_feats.mean(axis=0)
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise UsageError(
                "degenerate text features: a class differential has zero norm"
            )
        delta = delta / norms
        if align == "matched":
            means = delta
        else:
            means = delta[(np.arange(n_classes) + 1) % n_classes].copy()
    dataset = make_synthetic_dataset(
        n_classes, items_per_class, d_feat, seed,
        sigma=sigma, means=means, class_names=class_names,
        noise_seed=noise_seed,
    )
    return SyntheticSuite(dataset=dataset, vocab=vocab, enc=enc, means=means, align=align)
