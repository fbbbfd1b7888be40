import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seqweather.blending import BlendInputs, blend_batch, blend_pseudo_label, confidence_mask


def random_probs(rng, shape, C):
    logits = rng.standard_normal((*shape, C)) * rng.uniform(0.1, 4.0)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_confidence_mask_strict():
    q = np.random.default_rng(0).random((5, 5))
    assert np.all(confidence_mask(q, q) == 0)
    assert confidence_mask(np.array([0.9]), np.array([0.4]))[0] == 1


def test_confidence_mask_antisymmetric():
    rng = np.random.default_rng(1)
    a, b = rng.random((8, 8)), rng.random((8, 8))
    a[0, 0] = b[0, 0]
    assert np.all(confidence_mask(a, b) * confidence_mask(b, a) == 0)


def test_blend_worked_example():
    inputs = BlendInputs(
        probs_cur=np.array([[[0.4, 0.6]]]),
        probs_pre=np.array([[[0.9, 0.1]]]),
        q_cur=np.array([[0.6]]),
        q_pre=np.array([[0.9]]),
        m_feat_pre=np.array([[1.0]]),
    )
    label, score = blend_pseudo_label(inputs)
    assert label[0, 0] == 0
    assert score[0, 0] == np.float64(1.3)


def test_blend_tie_goes_to_lowest_class():
    inputs = BlendInputs(
        np.array([[[0.5, 0.5]]]), np.array([[[0.5, 0.5]]]), np.array([[0.5]]), np.array([[0.5]]), np.array([[1.0]])
    )
    assert blend_pseudo_label(inputs)[0][0, 0] == 0


def _inputs(rng, H=6, W=7, C=4, m_feat=None, q_pre=None):
    pc, pp = random_probs(rng, (H, W), C), random_probs(rng, (H, W), C)
    qp = pp.max(-1) if q_pre is None else q_pre
    mf = rng.random((H, W)) if m_feat is None else m_feat
    return BlendInputs(pc, pp, pc.max(-1), qp, mf), pc


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_blend_degenerates_when_a_gate_is_zero(seed):
    rng = np.random.default_rng(seed)
    inputs, pc = _inputs(rng, m_feat=np.zeros((6, 7)))
    assert np.array_equal(blend_pseudo_label(inputs)[0], pc.argmax(-1))
    inputs, pc = _inputs(rng, q_pre=np.zeros((6, 7)))
    assert np.array_equal(blend_pseudo_label(inputs)[0], pc.argmax(-1))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_blend_only_touches_pixels_where_previous_teacher_wins(seed):
    rng = np.random.default_rng(seed)
    inputs, pc = _inputs(rng)
    label, _ = blend_pseudo_label(inputs)
    keep = confidence_mask(inputs.q_pre, inputs.q_cur) == 0
    assert np.array_equal(label[keep], pc.argmax(-1)[keep])
    assert label.min() >= 0 and label.max() < pc.shape[-1]


def test_batch_form_matches_single_image():
    rng = np.random.default_rng(4)
    pc, pp = random_probs(rng, (2, 5, 5), 3), random_probs(rng, (2, 5, 5), 3)
    mf = rng.random((2, 5, 5))
    batch = blend_batch(
        torch.from_numpy(pc).permute(0, 3, 1, 2), torch.from_numpy(pp).permute(0, 3, 1, 2), torch.from_numpy(mf)
    )
    for b in range(2):
        single, _ = blend_pseudo_label(BlendInputs(pc[b], pp[b], pc[b].max(-1), pp[b].max(-1), mf[b]))
        assert np.array_equal(batch[b].numpy(), single)
