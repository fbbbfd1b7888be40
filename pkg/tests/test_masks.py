import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seqweather.masks import (
    AlphaSchedule,
    ClassPrototypes,
    TargetRepresentation,
    alpha_at,
    class_shift_weights,
    downsample_labels,
    feature_level_mask,
    feature_level_mask_batch,
    model_level_mask,
    target_representation,
    update_source_prototypes,
    update_source_prototypes_batch,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


# ---------------------------------------------------------------- model-level mask


def test_model_mask_value():
    m = model_level_mask(np.array([[0.9]]), np.array([[0.5]]), 0.8)
    assert m[0, 0] == pytest.approx(0.2 * 0.9 + 0.8 * 0.5)
    assert m[0, 0] == pytest.approx(0.58)


def test_model_mask_limits():
    rng = np.random.default_rng(0)
    qc, qp = rng.random((6, 7)), rng.random((6, 7))
    assert np.array_equal(model_level_mask(qc, qp, 0.0), qc)
    assert np.array_equal(model_level_mask(qc, qp, 1.0), qp)


def test_model_mask_shape_mismatch():
    with pytest.raises(ValueError):
        model_level_mask(np.zeros((2, 2)), np.zeros((2, 3)), 0.5)


@settings(max_examples=300, deadline=None)
@given(
    arrays(np.float64, (4, 5), elements=unit),
    arrays(np.float64, (4, 5), elements=unit),
    unit,
    st.floats(0.0, 0.5),
)
def test_model_mask_bounded_and_monotone(qc, qp, alpha, bump):
    m = model_level_mask(qc, qp, alpha)
    assert np.all(m >= 0.0) and np.all(m <= 1.0 + 1e-12)
    assert np.all(model_level_mask(np.minimum(qc + bump, 1.0), qp, alpha) >= m - 1e-12)
    assert np.all(model_level_mask(qc, np.minimum(qp + bump, 1.0), alpha) >= m - 1e-12)


# ---------------------------------------------------------------- alpha schedule


def test_alpha_schedule_endpoints():
    s = AlphaSchedule(0.8, 0.2, 1000)
    assert alpha_at(s, 0) == pytest.approx(0.8)
    assert alpha_at(s, 1000) == pytest.approx(0.2)
    assert alpha_at(s, 500) == pytest.approx(0.5)
    assert alpha_at(s, 5000) == pytest.approx(0.2)


def test_alpha_schedule_validation():
    with pytest.raises(ValueError):
        AlphaSchedule(0.2, 0.8, 10)
    with pytest.raises(ValueError):
        AlphaSchedule(0.8, 0.2, 0)


# ---------------------------------------------------------------- prototypes


def test_prototype_first_update_is_class_mean():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((4, 5, 6)).astype(np.float32)
    labels = rng.integers(0, 3, (4, 5))
    protos = update_source_prototypes(ClassPrototypes(3, 6), feats, labels)
    for c in range(3):
        sel = feats[labels == c]
        np.testing.assert_allclose(protos.sr[c].numpy(), sel.mean(axis=0), rtol=1e-5, atol=1e-6)
        assert protos.count[c] == 1


def test_prototype_geometric_convergence():
    d = 0.9
    protos = ClassPrototypes(2, 3, ema_decay_proto=d)
    protos.sr[0] = torch.tensor([1.0, -1.0, 2.0])
    protos.count[0] = 1
    f0 = np.array([0.5, 0.25, -1.0], dtype=np.float32)
    feats = np.broadcast_to(f0, (3, 3, 3)).copy()
    labels = np.zeros((3, 3), dtype=int)
    gaps = []
    for _ in range(5):
        update_source_prototypes(protos, feats, labels)
        gaps.append(np.linalg.norm(protos.sr[0].numpy() - f0))
    ratios = np.array(gaps[1:]) / np.array(gaps[:-1])
    np.testing.assert_allclose(ratios, d, rtol=1e-4)


def test_prototype_absent_class_untouched():
    protos = ClassPrototypes(3, 2)
    protos.sr[2] = torch.tensor([7.0, 8.0])
    protos.count[2] = 4
    update_source_prototypes(protos, np.ones((2, 2, 2)), np.zeros((2, 2), dtype=int))
    assert torch.equal(protos.sr[2], torch.tensor([7.0, 8.0])) and protos.count[2] == 4
    assert protos.count[1] == 0


def test_prototype_resolution_mismatch():
    with pytest.raises(ValueError):
        update_source_prototypes(ClassPrototypes(2, 3), np.zeros((4, 4, 3)), np.zeros((8, 8), dtype=int))


def test_batch_prototype_update_matches_flat():
    rng = np.random.default_rng(5)
    f = torch.from_numpy(rng.standard_normal((2, 4, 3, 3)).astype(np.float32))
    y = torch.from_numpy(rng.integers(0, 3, (2, 3, 3)))
    a = update_source_prototypes_batch(ClassPrototypes(3, 4), f, y)
    b = update_source_prototypes(ClassPrototypes(3, 4), f.permute(0, 2, 3, 1).reshape(1, 18, 4), y.reshape(1, 18))
    torch.testing.assert_close(a.sr, b.sr)


# ---------------------------------------------------------------- target representation


def brute_force_tr(feats, labels, C):
    tr = np.zeros((C, feats.shape[-1]))
    present = np.zeros(C, dtype=bool)
    for c in range(C):
        rows = [feats[i, j] for i in range(labels.shape[0]) for j in range(labels.shape[1]) if labels[i, j] == c]
        if rows:
            tr[c] = np.sum(rows, axis=0) / len(rows)
            present[c] = True
    return tr, present


def test_target_representation_single_class():
    feats = np.random.default_rng(0).standard_normal((3, 4, 5))
    tr = target_representation(feats, np.full((3, 4), 2), 4)
    np.testing.assert_allclose(tr.tr[2].numpy(), feats.reshape(-1, 5).mean(axis=0), rtol=1e-5)
    assert tr.present.tolist() == [False, False, True, False]


def test_target_representation_exact_partition():
    f1, f2 = np.array([1.0, 2.0]), np.array([-3.0, 0.5])
    feats = np.zeros((4, 4, 2))
    labels = np.zeros((4, 4), dtype=int)
    feats[:, :2] = f1
    feats[:, 2:] = f2
    labels[:, 2:] = 1
    tr = target_representation(feats, labels, 2)
    assert np.array_equal(tr.tr.numpy(), np.stack([f1, f2]).astype(np.float32))


def test_target_representation_brute_force():
    rng = np.random.default_rng(11)
    feats = rng.standard_normal((6, 7, 4)).astype(np.float32)
    labels = rng.integers(0, 5, (6, 7))
    labels[labels == 3] = 4  # leave one class empty
    tr = target_representation(feats, labels, 5)
    expect, present = brute_force_tr(feats, labels, 5)
    np.testing.assert_allclose(tr.tr.numpy(), expect, rtol=1e-5, atol=1e-6)
    assert tr.present.numpy().tolist() == present.tolist()


# ---------------------------------------------------------------- feature-level mask


def _protos(rows):
    rows = np.asarray(rows, dtype=np.float32)
    p = ClassPrototypes(rows.shape[0], rows.shape[1])
    p.sr = torch.from_numpy(rows)
    p.count[:] = 1
    return p


def _tr(rows, present=None):
    rows = torch.as_tensor(np.asarray(rows, dtype=np.float32))
    present = torch.ones(rows.shape[0], dtype=torch.bool) if present is None else torch.as_tensor(present)
    return TargetRepresentation(rows, present)


def test_feature_mask_zero_numerator():
    sr = [[0.0, 0.0], [5.0, 5.0]]
    w = class_shift_weights(_tr([[0.0, 0.0], [4.0, 1.0]]), _protos(sr))
    assert w[0] == 1.0


def test_feature_mask_single_class_is_zero():
    w = class_shift_weights(_tr([[1.0, 0.0], [9.0, 9.0]], [True, False]), _protos([[0.0, 0.0], [2.0, 2.0]]))
    assert w[0] == 0.0
    assert w[1] == 1.0  # absent in TR


def test_feature_mask_worked_example():
    # |TR_1 - SR_1|^2 = 1, |TR_2 - SR_1|^2 = 3  ->  1 - 1/4
    sr = [[0.0, 0.0], [10.0, 10.0]]
    tr = [[1.0, 0.0], [0.0, np.sqrt(3.0)]]
    w = class_shift_weights(_tr(tr), _protos(sr))
    assert w[0] == pytest.approx(0.75, abs=1e-6)
    m = feature_level_mask(_tr(tr), _protos(sr), np.array([[0, 1], [1, 0]]))
    assert m[0, 0] == pytest.approx(0.75, abs=1e-6) and m[1, 1] == pytest.approx(0.75, abs=1e-6)


def test_feature_mask_uninitialised_class_gets_one():
    p = _protos([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    p.count[1] = 0
    w = class_shift_weights(_tr([[0.5, 0.0], [3.0, 3.0], [2.0, 1.0]]), p)
    assert w[1] == 1.0
    # class 1 does not enter the denominators of the others either
    num = 0.25
    den = 0.25 + (4.0 + 1.0)
    assert w[0] == pytest.approx(1 - num / den, abs=1e-6)


def test_feature_mask_epsilon_rule():
    w = class_shift_weights(_tr([[1.0, 1.0], [1.0, 1.0]]), _protos([[1.0, 1.0], [1.0, 1.0]]))
    assert torch.all(w == 1.0)


def test_feature_mask_matched_denominator():
    sr = [[0.0, 0.0], [10.0, 0.0]]
    tr = [[1.0, 0.0], [10.0, 2.0]]
    w = class_shift_weights(_tr(tr), _protos(sr), "matched")
    # sum_c |TR_c - SR_c|^2 = 1 + 4
    assert w[0] == pytest.approx(1 - 1 / 5) and w[1] == pytest.approx(1 - 4 / 5)


def brute_weight(tr, present, sr, init, c1):
    valid = [c for c in range(len(tr)) if present[c] and init[c]]
    if c1 not in valid:
        return 1.0
    den = sum(float(np.sum((tr[c] - sr[c1]) ** 2)) for c in valid)
    if den < 1e-8:
        return 1.0
    return max(0.0, 1.0 - float(np.sum((tr[c1] - sr[c1]) ** 2)) / den)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.integers(1, 8))
def test_feature_mask_ratio_property(seed, C, D):
    rng = np.random.default_rng(seed)
    tr = rng.standard_normal((C, D)) * rng.uniform(0.01, 10)
    sr = rng.standard_normal((C, D))
    present = rng.random(C) < 0.8
    init = rng.random(C) < 0.8
    p = _protos(sr)
    p.count = torch.as_tensor(init.astype(np.int64))
    w = class_shift_weights(_tr(tr, present), p).numpy()
    assert np.all(w >= 0.0) and np.all(w <= 1.0)
    for c1 in range(C):
        ratio_ok = w[c1] == pytest.approx(brute_weight(tr.astype(np.float32), present, sr.astype(np.float32), init, c1), abs=1e-5)
        assert ratio_ok
    # the clamp at zero is only reachable through the ratio being exactly one
    valid = present & init
    if valid.sum() >= 2:
        for c1 in np.nonzero(valid)[0]:
            den = sum(np.sum((tr[c] - sr[c1]) ** 2) for c in np.nonzero(valid)[0])
            num = np.sum((tr[c1] - sr[c1]) ** 2)
            assert num <= den + 1e-9


def test_feature_mask_piecewise_constant():
    rng = np.random.default_rng(2)
    feats = torch.from_numpy(rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
    pred = torch.from_numpy(rng.integers(0, 3, (1, 16, 16)))
    p = _protos(rng.standard_normal((3, 4)))
    m = feature_level_mask_batch(feats, downsample_labels(pred, 4), pred, p)
    for c in range(3):
        vals = m[pred == c]
        if len(vals):
            assert torch.all(vals == vals[0])


def test_downsample_is_nearest():
    labels = np.arange(64).reshape(8, 8)
    assert np.array_equal(downsample_labels(labels, 4), [[0, 4], [32, 36]])
