"""Loss terms against hand-computed values and finite-difference oracles."""

import math

import numpy as np
import pytest

import labelalign.numerics as nm
from labelalign.errors import UsageError
from labelalign.losses import (
    KD_CLAMP_LO,
    CosineBatch,
    LossBreakdown,
    LossWeights,
    ce_loss,
    cos_loss,
    kd_loss,
    predict_probs,
    total_loss,
    wc_loss,
)
from labelalign.prompting import ClassEmbeddingTable, SoftContext, init_table, build_synthetic_vocab


def table_with(rows, refs, mask=None):
    rows = np.asarray(rows, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    k = rows.shape[0]
    if mask is None:
        mask = np.ones(k, dtype=bool)
    return ClassEmbeddingTable(
        rows=nm.tensor(rows.copy(), requires_grad=True),
        reference_rows=refs.copy(),
        class_names=[f"c{i}" for i in range(k)],
        trainable_mask=np.asarray(mask, dtype=bool),
    )


# --------------------------------------------------------------------------
# predict_probs / ce_loss
# --------------------------------------------------------------------------

def test_predict_probs_single_category():
    assert np.array_equal(predict_probs([0.37], tau=0.01), [1.0])


def test_predict_probs_symmetry():
    assert np.array_equal(predict_probs([0.2, 0.2], tau=0.01), [0.5, 0.5])


def test_predict_probs_hand_value():
    p = predict_probs([0.3, 0.1], tau=0.1)
    assert np.all(np.abs(p - [0.8808, 0.1192]) <= 1e-4)


def test_ce_zero_when_true_class_certain():
    # cosine gap of 2 at tau 0.01 puts the wrong-class probability below
    # the float64 horizon, so -log(p_true) is 0 to well under 1e-6
    cos = nm.constant(np.array([[1.0, -1.0]]))
    val = ce_loss(cos, [0], tau=0.01).item()
    assert 0.0 <= val <= 1e-6


def test_ce_uniform_is_log_k():
    cos = nm.constant(np.full((3, 4), 0.25))
    val = ce_loss(cos, [0, 1, 3], tau=0.01).item()
    assert abs(val - math.log(4.0)) <= 1e-6


def test_ce_single_item_hand_value():
    cos = nm.constant(np.array([[0.3, 0.1]]))
    val = ce_loss(cos, [0], tau=0.1).item()
    assert abs(val - 0.1269) <= 1e-3  # -ln(0.8808)


def test_ce_is_nonnegative():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cos = nm.constant(rng.uniform(-1, 1, size=(4, 5)))
        labels = rng.integers(0, 5, size=4)
        assert ce_loss(cos, labels, tau=0.01).item() >= 0.0


def test_ce_rejects_bad_labels():
    cos = nm.constant(np.zeros((2, 3)))
    with pytest.raises(UsageError):
        ce_loss(cos, [0, 3], tau=0.01)
    with pytest.raises(UsageError):
        ce_loss(cos, [0], tau=0.01)


def test_ce_grad_check():
    rng = np.random.default_rng(0)
    cos = rng.uniform(-0.9, 0.9, size=(3, 4))
    labels = np.array([1, 0, 3])
    err = nm.grad_check(lambda t: ce_loss(t, labels, tau=0.1), nm.tensor(cos))
    assert err <= 1e-4


# --------------------------------------------------------------------------
# wc_loss
# --------------------------------------------------------------------------

def test_wc_zero_at_init():
    t = table_with([[1.0, 2.0]], [[1.0, 2.0]])
    assert wc_loss(t).item() == 0.0


def test_wc_hand_value_five():
    t = table_with([[1.0, 2.0]], [[0.0, 0.0]])
    assert wc_loss(t).item() == 5.0  # 1 + 4


def test_wc_hand_value_four():
    t = table_with([[1.0]], [[3.0]])
    assert wc_loss(t).item() == 4.0  # (-2)^2


def test_wc_counts_only_trainable_rows():
    t = table_with([[1.0], [1.0]], [[0.0], [0.0]], mask=[True, False])
    assert wc_loss(t).item() == 1.0


def test_wc_includes_context_drift():
    t = table_with([[0.0]], [[0.0]])
    ctx = SoftContext(
        vectors=nm.tensor(np.array([[2.0, 0.0]]), requires_grad=True),
        reference=np.array([[0.0, 0.0]]),
    )
    assert wc_loss(t, ctx).item() == 4.0


def test_wc_all_frozen_is_constant_zero():
    t = table_with([[5.0]], [[0.0]], mask=[False])
    assert wc_loss(t).item() == 0.0


def test_wc_nonnegative_property():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        rows = rng.normal(size=(3, 4))
        refs = rng.normal(size=(3, 4))
        assert wc_loss(table_with(rows, refs)).item() >= 0.0


def test_wc_grad_check():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(3, 4))
    refs = rng.normal(size=(3, 4))

    def fn(t):
        tab = table_with(t.data, refs)
        tab.rows = t
        return wc_loss(tab)

    err = nm.grad_check(fn, nm.tensor(rows))
    assert err <= 1e-4


# --------------------------------------------------------------------------
# cos_loss
# --------------------------------------------------------------------------

def test_cos_zero_for_identical_features():
    f = np.array([[1.0, 0.0], [0.0, 1.0]])
    students = [nm.constant(f[0]), nm.constant(f[1])]
    assert cos_loss(students, f).item() == 0.0


def test_cos_orthogonal_pair_is_one():
    students = [nm.constant(np.array([1.0, 0.0]))]
    teachers = np.array([[0.0, 1.0]])
    assert cos_loss(students, teachers).item() == 1.0


def test_cos_identical_plus_antiparallel_is_two():
    students = [nm.constant(np.array([1.0, 0.0])), nm.constant(np.array([0.0, 1.0]))]
    teachers = np.array([[1.0, 0.0], [0.0, -1.0]])
    assert cos_loss(students, teachers).item() == 2.0


def test_cos_range_property():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        k = 5
        students = [nm.constant(rng.normal(size=6)) for _ in range(k)]
        teachers = rng.normal(size=(k, 6))
        v = cos_loss(students, teachers).item()
        assert 0.0 <= v <= 2.0 * k


def test_cos_grad_check():
    rng = np.random.default_rng(2)
    teachers = rng.normal(size=(3, 5))

    def fn(t):
        students = [nm.take_row(t, i) for i in range(3)]
        return cos_loss(students, teachers)

    err = nm.grad_check(fn, nm.tensor(rng.normal(size=(3, 5))))
    assert err <= 1e-4


# --------------------------------------------------------------------------
# kd_loss
# --------------------------------------------------------------------------

def test_kd_zero_when_teacher_cosine_is_one():
    batch = CosineBatch(nm.constant(np.ones((1, 1))), np.ones((1, 1)))
    assert kd_loss(batch).item() == 0.0


def test_kd_hand_value_half():
    batch = CosineBatch(nm.constant(np.full((1, 1), 0.5)), np.full((1, 1), 0.5))
    val = kd_loss(batch).item()
    assert abs(val - (-0.5 * math.log(0.5))) <= 1e-6  # 0.3466


def test_kd_clamp_region():
    # teacher -0.2 clamps to 1e-4; term = -s * ln(1e-4) = s * 9.2103
    s = 0.7
    batch = CosineBatch(nm.constant(np.full((1, 1), s)), np.full((1, 1), -0.2))
    val = kd_loss(batch).item()
    assert abs(val - s * (-math.log(KD_CLAMP_LO))) <= 1e-3
    assert abs(val - s * 9.2103) <= 1e-3


def test_kd_batch_mean():
    # two identical items must give the same value as one
    one = CosineBatch(nm.constant(np.full((1, 2), 0.5)), np.full((1, 2), 0.5))
    two = CosineBatch(nm.constant(np.full((2, 2), 0.5)), np.full((2, 2), 0.5))
    assert abs(kd_loss(one).item() - kd_loss(two).item()) <= 1e-15


def test_kd_self_distillation_identity_at_init():
    # student == teacher: kd equals -mean_b sum_k t*log(clamp(t))
    rng = np.random.default_rng(3)
    t = rng.uniform(-0.5, 0.9, size=(4, 3))
    batch = CosineBatch(nm.constant(t.copy()), t.copy())
    expected = -np.mean(np.sum(t * np.log(np.clip(t, KD_CLAMP_LO, 1.0)), axis=1))
    assert abs(kd_loss(batch).item() - expected) <= 1e-12


def test_kd_grad_check_literal():
    rng = np.random.default_rng(4)
    teacher = rng.uniform(0.1, 0.9, size=(3, 4))

    def fn(t):
        return kd_loss(CosineBatch(t, teacher))

    err = nm.grad_check(fn, nm.tensor(rng.uniform(-0.9, 0.9, size=(3, 4))))
    assert err <= 1e-4


def test_kd_grad_check_swapped():
    rng = np.random.default_rng(5)
    teacher = rng.uniform(-0.9, 0.9, size=(3, 4))

    def fn(t):
        return kd_loss(CosineBatch(t, teacher), mode="swapped", tau=0.1)

    err = nm.grad_check(fn, nm.tensor(rng.uniform(-0.9, 0.9, size=(3, 4))))
    assert err <= 1e-4


def test_kd_swapped_is_teacher_weighted_ce():
    rng = np.random.default_rng(6)
    student = rng.uniform(-0.9, 0.9, size=(2, 3))
    teacher = rng.uniform(-0.9, 0.9, size=(2, 3))
    got = kd_loss(CosineBatch(nm.constant(student), teacher), mode="swapped", tau=0.1).item()
    tp = np.exp(teacher / 0.1 - (teacher / 0.1).max(axis=1, keepdims=True))
    tp /= tp.sum(axis=1, keepdims=True)
    sl = student / 0.1
    sl = sl - sl.max(axis=1, keepdims=True)
    slog = sl - np.log(np.exp(sl).sum(axis=1, keepdims=True))
    expected = -np.mean(np.sum(tp * slog, axis=1))
    assert abs(got - expected) <= 1e-10


def test_kd_unknown_mode():
    batch = CosineBatch(nm.constant(np.ones((1, 1))), np.ones((1, 1)))
    with pytest.raises(UsageError):
        kd_loss(batch, mode="inverted")


def test_cosine_batch_shape_check():
    with pytest.raises(UsageError):
        CosineBatch(nm.constant(np.ones((2, 3))), np.ones((2, 2)))


# --------------------------------------------------------------------------
# LossWeights / total_loss
# --------------------------------------------------------------------------

def test_lambda1_defaults_to_inverse_shots():
    assert LossWeights(shots=16).l1 == 0.0625
    assert LossWeights(shots=1).l1 == 1.0
    assert LossWeights(shots=16).l2 == 1.0
    assert LossWeights(shots=16).l3 == 0.05


def test_lambda1_override_wins():
    assert LossWeights(shots=16, lambda1=2.0).l1 == 2.0
    assert LossWeights(shots=16, lambda1=0.0).l1 == 0.0


def test_negative_lambda_rejected():
    with pytest.raises(UsageError):
        LossWeights(shots=4, lambda1=-1.0)
    with pytest.raises(UsageError):
        LossWeights(shots=4, lambda3=-0.1)
    with pytest.raises(UsageError):
        LossWeights(shots=0)


def test_total_equals_ce_when_lambdas_zero():
    w = LossWeights(shots=4, lambda1=0.0, lambda2=0.0, lambda3=0.0)
    ce = nm.constant(1.25)
    node, bd = total_loss(ce, nm.constant(9.0), nm.constant(9.0), nm.constant(9.0), w)
    assert node.item() == 1.25
    assert bd.total == bd.ce == 1.25


def test_total_recomposition_identity():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        ce, wc, cos, kd = rng.uniform(0, 3, size=4)
        w = LossWeights(shots=int(rng.integers(1, 20)),
                        lambda2=float(rng.uniform(0, 2)),
                        lambda3=float(rng.uniform(0, 2)))
        _, bd = total_loss(
            nm.constant(ce), nm.constant(wc), nm.constant(cos), nm.constant(kd), w
        )
        assert abs(bd.total - (bd.ce + w.l1 * bd.wc + w.l2 * bd.cos + w.l3 * bd.kd)) <= 1e-12


def test_breakdown_flags_nonfinite_terms():
    bd = LossBreakdown(ce=1.0, wc=float("inf"), cos=0.0, kd=float("nan"), total=float("nan"))
    assert not bd.is_finite()
    assert bd.nonfinite_terms() == ["wc", "kd", "total"]
    assert LossBreakdown(1.0, 0.0, 0.0, 0.0, 1.0).is_finite()


def test_lambda_scaling_preserves_gradient_support():
    # scaling every lambda by a positive factor must not change WHICH
    # parameters receive nonzero gradient, only the magnitudes
    vocab = build_synthetic_vocab(["ca", "cb"], 8, seed=0)
    rng = np.random.default_rng(7)

    def grads_for(scale_factor):
        table = init_table(vocab, ["ca", "cb"], mode="random", seed=1)
        w = LossWeights(shots=2, lambda1=0.5 * scale_factor,
                        lambda2=1.0 * scale_factor, lambda3=0.05 * scale_factor)
        student_cos_rows = rng.uniform(-0.5, 0.5, size=(2, 2))
        with nm.Tape() as tape:
            picked = nm.take_rows(table.rows, [0, 1])
            feats = nm.l2_normalize(picked)
            students = [nm.take_row(feats, i) for i in range(2)]
            teachers = np.eye(2, 8)
            scores = nm.matmul(feats, nm.constant(teachers.T.copy()))
            ce = ce_loss(scores, [0, 1], tau=0.1)
            wc = wc_loss(table)
            cos = cos_loss(students, teachers)
            kd = kd_loss(CosineBatch(scores, student_cos_rows * 0 + 0.5))
            node, _ = total_loss(ce, wc, cos, kd, w)
            tape.backward(node)
        return table.rows.grad.copy()

    rng = np.random.default_rng(7)
    g1 = grads_for(1.0)
    rng = np.random.default_rng(7)
    g3 = grads_for(3.0)
    assert np.array_equal(g1 != 0.0, g3 != 0.0)
    assert g1.any()
