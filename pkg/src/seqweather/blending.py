"""Pseudo-label blending of the current and previous teacher."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def confidence_mask(q_pre, q_cur):
    """1 where the previous teacher is strictly more confident, else 0."""
    if tuple(np.shape(q_pre)) != tuple(np.shape(q_cur)):
        raise ValueError("confidence maps differ in shape")
    out = (_t(q_pre) > _t(q_cur)).to(torch.float32)
    return out if isinstance(q_pre, torch.Tensor) else out.numpy()


@dataclass
class BlendInputs:
    """Spatially aligned teacher outputs; probabilities are channel-last (... x H x W x C)."""

    probs_cur: object
    probs_pre: object
    q_cur: object
    q_pre: object
    m_feat_pre: object


def blend_pseudo_label(inputs: BlendInputs):
    """Return ``(pseudo_label, blend_score)``.

    ``pseudo_label = argmax_c(probs_cur + M_con * M_feat_pre * probs_pre)`` with ties
    going to the lowest class index; ``blend_score`` is the winning combined value.
    """
    p_cur = _t(inputs.probs_cur)
    p_pre = _t(inputs.probs_pre)
    gate = _t(confidence_mask(_t(inputs.q_pre), _t(inputs.q_cur))) * _t(inputs.m_feat_pre).to(p_cur.dtype)
    combined = p_cur + gate.unsqueeze(-1) * p_pre
    score, label = _first_argmax(combined)
    if isinstance(inputs.probs_cur, torch.Tensor):
        return label, score
    return label.numpy(), score.numpy()


def _first_argmax(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # lowest index among exact ties
    best = x.max(dim=-1, keepdim=True).values
    idx = torch.arange(x.shape[-1]).expand_as(x)
    label = torch.where(x == best, idx, x.shape[-1]).min(dim=-1).values
    return best.squeeze(-1), label


def blend_batch(
    probs_cur: torch.Tensor,
    probs_pre: torch.Tensor,
    m_feat_pre: torch.Tensor,
) -> torch.Tensor:
    """Channel-first batch form used in training: probs B x C x H x W -> labels B x H x W."""
    q_cur = probs_cur.max(dim=1).values
    q_pre = probs_pre.max(dim=1).values
    gate = (q_pre > q_cur).to(probs_cur.dtype) * m_feat_pre
    combined = probs_cur + gate.unsqueeze(1) * probs_pre
    return _first_argmax(combined.movedim(1, -1))[1]
