"""Classification loss plus the three hierarchical regularizers.

The total objective is CE + lambda1*WC + lambda2*COS + lambda3*KD:
cross-entropy over temperature-scaled cosines, squared drift of trainable
embeddings from their init (parameter space), 1 - cos between tuned and
reference text features (feature space), and a distillation term against
the frozen reference cosines (logit space). lambda1 defaults to 1/shots,
so fewer shots mean a stiffer anchor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import UsageError
from .prompting import ClassEmbeddingTable, SoftContext

KD_CLAMP_LO = 1e-4
KD_CLAMP_HI = 1.0
KD_MODES = ("literal", "swapped")


@dataclass(frozen=True)
class LossWeights:
    """lambda1 defaults to 1/shots when not overridden."""

    shots: int
    lambda1: float | None = None
    lambda2: float = 1.0
    lambda3: float = 0.05

    def __post_init__(self):
        if self.shots < 1:
            raise UsageError(f"shots must be >= 1, got {self.shots}")
        for name in ("lambda1", "lambda2", "lambda3"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise UsageError(f"{name} must be non-negative, got {v}")

    @property
    def l1(self) -> float:
        return 1.0 / self.shots if self.lambda1 is None else float(self.lambda1)

    @property
    def l2(self) -> float:
        return float(self.lambda2)

    @property
    def l3(self) -> float:
        return float(self.lambda3)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    wc: float
    cos: float
    kd: float
    total: float

    def is_finite(self) -> bool:
        return all(map(math.isfinite, (self.ce, self.wc, self.cos, self.kd, self.total)))

    def nonfinite_terms(self) -> list[str]:
        return [
            name for name in ("ce", "wc", "cos", "kd", "total")
            if not math.isfinite(getattr(self, name))
        ]


@dataclass
class CosineBatch:
    """Student cosine rows with the cached teacher rows for the same items."""

    student: nm.DenseTensor   # (B, K), differentiable
    teacher: np.ndarray       # (B, K), frozen

    def __post_init__(self):
        if self.student.data.shape != self.teacher.shape:
            raise UsageError(
                f"student/teacher cosine shapes differ: "
                f"{self.student.data.shape} vs {self.teacher.shape}"
            )


def predict_probs(logit_row: np.ndarray, tau: float) -> np.ndarray:
    """Softmax over cos/tau across all K categories (plain arrays, no tape)."""
    row = np.asarray(logit_row, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] < 1:
        raise UsageError("predict_probs expects a non-empty 1D cosine row")
    return nm.softmax_with_temperature(nm.constant(row), tau).data


def ce_loss(student_cos: nm.DenseTensor, labels, tau: float) -> nm.DenseTensor:
    """Mean over the batch of -log softmax(cos/tau)[true class]."""
    b, k = student_cos.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (b,):
        raise UsageError(f"labels shape {labels.shape} does not match batch {b}")
    if b < 1:
        raise UsageError("empty batch")
    if labels.min() < 0 or labels.max() >= k:
        raise UsageError("label index out of range")
    logp = nm.log_softmax_with_temperature(student_cos, tau)
    picked = nm.take_per_row(logp, labels)
    return nm.neg(nm.mean(picked))


def wc_loss(
    table: ClassEmbeddingTable, context: SoftContext | None = None
) -> nm.DenseTensor:
    """Sum of squared drift from init over trainable rows and context."""
    total = None
    idx = table.trainable_indices()
    if idx:
        if len(idx) == table.n_classes:
            live = table.rows
            ref = table.reference_rows
        else:
            live = nm.take_rows(table.rows, idx)
            ref = table.reference_rows[idx]
        diff = nm.sub(live, nm.constant(ref))
        total = nm.sum_(nm.square(diff))
    if context is not None and context.trainable:
        cdiff = nm.sub(context.vectors, nm.constant(context.reference))
        cterm = nm.sum_(nm.square(cdiff))
        total = cterm if total is None else nm.add(total, cterm)
    if total is None:
        return nm.constant(0.0)
    return total


def cos_loss(student_feats, teacher_feats: np.ndarray) -> nm.DenseTensor:
    """Sum over classes of 1 - cos(tuned feature, reference feature)."""
    teacher_feats = np.asarray(teacher_feats, dtype=np.float64)
    if len(student_feats) != teacher_feats.shape[0]:
        raise UsageError("student/teacher feature counts differ")
    total = nm.constant(0.0)
    for i, sf in enumerate(student_feats):
        c = nm.cosine_sim(sf, nm.constant(teacher_feats[i]))
        total = nm.add(total, nm.sub(nm.constant(1.0), c))
    return total


def kd_loss(batch: CosineBatch, mode: str = "literal", tau: float = 0.01) -> nm.DenseTensor:
    """Distill the frozen reference cosines into the tuned ones.

    literal: -mean over the batch of sum_k student_cos * log(teacher_cos
    clamped to [1e-4, 1]). The clamp absorbs non-positive teacher cosines;
    tau plays no role. swapped: conventional direction, -mean_b sum_k
    softmax(teacher/tau) * log_softmax(student/tau), kept for comparison
    because the literal student/teacher placement is unusual.
    """
    b = batch.teacher.shape[0]
    if mode == "literal":
        log_teacher = nm.log(
            nm.clamp(nm.constant(batch.teacher), KD_CLAMP_LO, KD_CLAMP_HI)
        )
        per_entry = nm.mul(batch.student, log_teacher)
        return nm.scale(nm.sum_(per_entry), -1.0 / b)
    if mode == "swapped":
        tprob = nm.softmax_with_temperature(nm.constant(batch.teacher), tau).data
        slogp = nm.log_softmax_with_temperature(batch.student, tau)
        per_entry = nm.mul(nm.constant(tprob), slogp)
        return nm.scale(nm.sum_(per_entry), -1.0 / b)
    raise UsageError(f"unknown kd mode {mode!r} (expected literal or swapped)")


def total_loss(
    ce: nm.DenseTensor,
    wc: nm.DenseTensor,
    cos: nm.DenseTensor,
    kd: nm.DenseTensor,
    weights: LossWeights,
) -> tuple[nm.DenseTensor, LossBreakdown]:
    """Assemble the weighted total; returns the node and a float breakdown."""
    total = nm.add(ce, nm.scale(wc, weights.l1))
    total = nm.add(total, nm.scale(cos, weights.l2))
    total = nm.add(total, nm.scale(kd, weights.l3))
    breakdown = LossBreakdown(
        ce=ce.item(), wc=wc.item(), cos=cos.item(), kd=kd.item(), total=total.item()
    )
    return total, breakdown
