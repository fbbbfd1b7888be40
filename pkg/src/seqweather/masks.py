"""Adaptive knowledge-acquisition weights: model-level and feature-level masks.

Arrays may be numpy or torch; results come back in the kind that went in.
Feature maps are channel-last (``h x w x D``) at the single-image level and
channel-first (``B x D x h x w``) in the batched helpers used by the trainer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DENOM_EPS = 1e-8


def _t(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))


def _like(result: torch.Tensor, ref):
    return result if isinstance(ref, torch.Tensor) else result.numpy()


def model_level_mask(q_cur, q_pre, alpha: float):
    if tuple(np.shape(q_cur)) != tuple(np.shape(q_pre)):
        raise ValueError(f"confidence maps differ in shape: {np.shape(q_cur)} vs {np.shape(q_pre)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * q_cur + alpha * q_pre


@dataclass(frozen=True)
class AlphaSchedule:
    alpha_start: float = 0.8
    alpha_end: float = 0.2
    total_iters: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha_end <= self.alpha_start <= 1.0:
            raise ValueError("need 0 <= alpha_end <= alpha_start <= 1")
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")


def alpha_at(schedule: AlphaSchedule, it: int) -> float:
    """Linear ramp from ``alpha_start`` at 0 to ``alpha_end`` at ``total_iters``, then flat."""
    if it < 0:
        raise ValueError("iteration must be non-negative")
    frac = min(it / schedule.total_iters, 1.0)
    return schedule.alpha_start + frac * (schedule.alpha_end - schedule.alpha_start)


def downsample_labels(labels, stride: int):
    """Nearest-neighbour downsampling of a ``... x H x W`` class-id map."""
    return labels[..., ::stride, ::stride]


def class_means(features: torch.Tensor, labels: torch.Tensor, num_classes: int):
    """Per-class mean of ``features`` (P x D) grouped by ``labels`` (P,).

    Returns ``(means C x D, counts C)``; rows with zero count are zero.
    """
    labels = labels.reshape(-1).long()
    features = features.reshape(labels.numel(), -1)
    sums = torch.zeros(num_classes, features.shape[1], dtype=features.dtype)
    sums.index_add_(0, labels, features)
    counts = torch.bincount(labels, minlength=num_classes)[:num_classes]
    means = sums / counts.clamp(min=1).unsqueeze(1).to(features.dtype)
    return means, counts


class ClassPrototypes:
    """EMA of class-wise source feature vectors (``sr``) plus update counts."""

    def __init__(self, num_classes: int, dim: int, ema_decay_proto: float = 0.99):
        self.sr = torch.zeros(num_classes, dim, dtype=torch.float32)
        self.count = torch.zeros(num_classes, dtype=torch.int64)
        self.ema_decay_proto = ema_decay_proto

    @property
    def num_classes(self) -> int:
        return self.sr.shape[0]

    @property
    def initialized(self) -> torch.Tensor:
        return self.count > 0

    def copy(self) -> "ClassPrototypes":
        out = ClassPrototypes(self.num_classes, self.sr.shape[1], self.ema_decay_proto)
        out.sr = self.sr.clone()
        out.count = self.count.clone()
        return out


def update_source_prototypes(protos: ClassPrototypes, features, labels) -> ClassPrototypes:
    """EMA-update ``protos`` in place from one labelled feature map (``h x w x D``, ``h x w``)."""
    f = _t(features)
    y = _t(labels)
    if tuple(f.shape[:-1]) != tuple(y.shape):
        raise ValueError(f"feature map {tuple(f.shape)} and labels {tuple(y.shape)} differ in resolution")
    means, counts = class_means(f.reshape(-1, f.shape[-1]).float(), y, protos.num_classes)
    _ema_rows(protos, means, counts)
    return protos


def update_source_prototypes_batch(protos: ClassPrototypes, features: torch.Tensor, labels: torch.Tensor):
    """Batched form: ``features`` B x D x h x w, ``labels`` B x h x w (already at feature resolution)."""
    if features.shape[0] != labels.shape[0] or tuple(features.shape[2:]) != tuple(labels.shape[1:]):
        raise ValueError("feature/label resolution mismatch")
    flat = features.permute(0, 2, 3, 1).reshape(-1, features.shape[1]).float()
    means, counts = class_means(flat, labels, protos.num_classes)
    _ema_rows(protos, means, counts)
    return protos


def _ema_rows(protos: ClassPrototypes, means: torch.Tensor, counts: torch.Tensor) -> None:
    d = protos.ema_decay_proto
    for c in torch.nonzero(counts > 0).flatten().tolist():
        if protos.count[c] == 0:
            protos.sr[c] = means[c]
        else:
            protos.sr[c] = d * protos.sr[c] + (1.0 - d) * means[c]
        protos.count[c] += 1


@dataclass
class TargetRepresentation:
    tr: torch.Tensor  # C x D
    present: torch.Tensor  # C, bool


def target_representation(features, pseudo_label, num_classes: int | None = None) -> TargetRepresentation:
    """Class-wise mean of one ``h x w x D`` target feature map under its pseudo-label."""
    f = _t(features).float()
    y = _t(pseudo_label).long()
    if tuple(f.shape[:-1]) != tuple(y.shape):
        raise ValueError("pseudo-label must be at feature resolution")
    if num_classes is None:
        num_classes = int(y.max()) + 1
    means, counts = class_means(f.reshape(-1, f.shape[-1]), y, num_classes)
    return TargetRepresentation(tr=means, present=counts > 0)


def class_shift_weights(tr: TargetRepresentation, protos: ClassPrototypes, denominator: str = "literal") -> torch.Tensor:
    """Per-class weight m(c1) = max(0, 1 - |TR_c1 - SR_c1|^2 / sum_c |TR_c - SR_x|^2).

    ``denominator="literal"`` uses SR_c1 in every summand (x = c1);
    ``"matched"`` pairs each TR_c with its own SR_c (x = c).
    Classes without a valid TR row or SR row get weight 1.
    """
    sr = protos.sr.to(tr.tr.dtype)
    valid = tr.present & protos.initialized
    C = sr.shape[0]
    weights = torch.ones(C, dtype=torch.float64)
    if not bool(valid.any()):
        return weights
    # dist[c, c1] = |TR_c - SR_c1|^2
    dist = (tr.tr.double().unsqueeze(1) - sr.double().unsqueeze(0)).pow(2).sum(dim=-1)
    vmask = valid.double().unsqueeze(1)
    if denominator == "literal":
        denom = (dist * vmask).sum(dim=0)
    elif denominator == "matched":
        denom = (torch.diagonal(dist) * valid.double()).sum().expand(C)
    else:
        raise ValueError(f"unknown denominator mode {denominator!r}")
    num = torch.diagonal(dist)
    for c1 in torch.nonzero(valid).flatten().tolist():
        if denom[c1] < DENOM_EPS:
            weights[c1] = 1.0
        else:
            weights[c1] = max(0.0, 1.0 - float(num[c1] / denom[c1]))
    return weights


def feature_level_mask(tr: TargetRepresentation, protos: ClassPrototypes, pred_class_map, denominator: str = "literal"):
    """Broadcast per-class shift weights over the predicted-class map (H x W)."""
    m = class_shift_weights(tr, protos, denominator)
    pred = _t(pred_class_map).long()
    return _like(m[pred], pred_class_map)


def feature_level_mask_batch(
    features: torch.Tensor,
    class_map_lowres: torch.Tensor,
    class_map: torch.Tensor,
    protos: ClassPrototypes,
    denominator: str = "literal",
) -> torch.Tensor:
    """Per-image feature-level masks for a batch.

    ``features`` B x D x h x w; ``class_map_lowres`` B x h x w groups the features
    into TR; ``class_map`` B x H x W is the predicted class per output pixel.
    """
    out = torch.empty(class_map.shape, dtype=torch.float32)
    C = protos.num_classes
    for b in range(features.shape[0]):
        f = features[b].permute(1, 2, 0)
        tr = target_representation(f, class_map_lowres[b], C)
        out[b] = class_shift_weights(tr, protos, denominator).float()[class_map[b].long()]
    return out
