"""Sequential teacher-student adaptation over a list of weather domains."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .blending import blend_batch
from .container import read_container, write_container
from .data import ArrayDataset
from .masks import (
    AlphaSchedule,
    ClassPrototypes,
    alpha_at,
    downsample_labels,
    feature_level_mask_batch,
    model_level_mask,
    update_source_prototypes_batch,
)
from .metrics import confusion_matrix, iou_scores
from .model import (
    SegmentationModel,
    TeacherEnsemble,
    ema_update,
    parameter_digest,
    to_tensor,
)
from .replay import ComposeParams, WeatherVector, accumulate_weather, replay_all

log = logging.getLogger(__name__)

PROTOS_KIND = "class-prototypes"


class TrainingDivergedError(RuntimeError):
    pass


class MissingArtifactsError(RuntimeError):
    pass


@dataclass(frozen=True)
class Flags:
    use_model_mask: bool = True
    use_feature_mask: bool = True
    use_blending: bool = True
    use_replay: bool = True
    with_source: bool = True


ABLATIONS = {
    "full": Flags(),
    "baseline": Flags(False, False, False, False),
    "model": Flags(True, False, False, False),
    "model_feature": Flags(True, True, False, False),
    "model_feature_replay": Flags(True, True, False, True),
    "blending": Flags(False, False, True, False),
}
ABLATIONS["none"] = ABLATIONS["full"]


@dataclass(frozen=True)
class StepConfig:
    step_index: int
    iters: int = 300
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    alpha_schedule: AlphaSchedule = AlphaSchedule(0.8, 0.2, 300)
    compose_params: ComposeParams = ComposeParams()
    flags: Flags = Flags()
    crop_size: int = 64
    ema_decay: float = 0.99
    denominator: str = "literal"
    soft_labels: bool = False
    log_every: int = 25
    seed: int = 0
    class_mix: bool = True

    def __post_init__(self):
        if self.step_index < 1:
            raise ValueError("step_index starts at 1")


@dataclass
class StepArtifacts:
    student: SegmentationModel
    teacher: SegmentationModel
    weather: WeatherVector
    protos: ClassPrototypes
    log: list[dict] = field(default_factory=list)


# ---------------------------------------------------------------- batches


def _crop_batch(images, labels, idx, crop, rng):
    H, W = images.shape[1:3]
    c = min(crop, H, W)
    xs, ys = [], []
    for i in idx:
        top = int(rng.integers(0, H - c + 1))
        left = int(rng.integers(0, W - c + 1))
        xs.append(images[i, top : top + c, left : left + c])
        if labels is not None:
            ys.append(labels[i, top : top + c, left : left + c])
    return np.stack(xs), (np.stack(ys) if labels is not None else None)


def sample_batch(ds: ArrayDataset, batch_size: int, crop: int, rng, with_labels=True):
    if len(ds) == 0:
        raise ValueError(f"dataset {ds.domain!r} is empty")
    idx = rng.integers(0, len(ds), size=batch_size)
    return _crop_batch(ds.images, ds.labels if with_labels else None, idx, crop, rng)


def _labels_tensor(y: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(y.astype(np.int64))


def _step_rng(*words) -> np.random.Generator:
    return np.random.default_rng([int(w) for w in words])


# ---------------------------------------------------------------- source training


def cross_entropy_map(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-pixel CE; ``target`` is B x H x W ids or B x C x H x W soft targets."""
    if target.dtype.is_floating_point:
        return -(target * F.log_softmax(logits, dim=1)).sum(dim=1)
    return F.cross_entropy(logits, target, reduction="none")


def train_source(
    model: SegmentationModel,
    source: ArrayDataset,
    iters: int,
    batch_size: int = 8,
    lr: float = 0.05,
    momentum: float = 0.9,
    crop: int = 64,
    seed: int = 0,
) -> SegmentationModel:
    """Supervised pixel-wise cross-entropy on labelled source crops."""
    if len(source) == 0 or source.labels is None:
        raise ValueError("source training needs a non-empty labelled dataset")
    if iters == 0:
        return model
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum)
    for it in range(iters):
        rng = _step_rng(seed, 0, it)
        x, y = sample_batch(source, batch_size, crop, rng)
        loss = F.cross_entropy(model(to_tensor(x)), _labels_tensor(y))
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"source loss became {loss.item()} at iteration {it}")
    return model


# ---------------------------------------------------------------- one adaptation step


@dataclass
class IterationTerms:
    """Everything the target loss needs for one batch, computed without gradients."""

    composed: torch.Tensor  # student input, B x 3 x H x W
    pseudo: torch.Tensor  # B x H x W ids, or B x C x H x W soft targets
    weight: torch.Tensor  # B x H x W
    stats: dict


@torch.no_grad()
def target_terms(
    ensemble: TeacherEnsemble,
    x_t: np.ndarray,
    protos: ClassPrototypes,
    vectors: list[WeatherVector],
    cfg: StepConfig,
    alpha: float,
    rng: np.random.Generator,
    source_batch: tuple[np.ndarray, np.ndarray] | None = None,
) -> IterationTerms:
    flags = cfg.flags
    prev = ensemble.previous_teacher
    stride = ensemble.teacher.arch.stride
    xt = to_tensor(x_t)
    logits_cur, feat_cur = ensemble.teacher.forward_with_features(xt)
    probs_cur = torch.softmax(logits_cur, dim=1)
    q_cur = probs_cur.max(dim=1).values
    probs_pre = q_pre = None
    if prev is not None and (flags.use_model_mask or flags.use_blending):
        logits_pre, feat_pre = prev.forward_with_features(xt)
        probs_pre = torch.softmax(logits_pre, dim=1)
        q_pre = probs_pre.max(dim=1).values

    stats = {}
    if flags.use_blending and probs_pre is not None:
        if flags.with_source:
            pre_map = probs_pre.argmax(dim=1)
            m_feat_pre = feature_level_mask_batch(
                feat_pre, downsample_labels(pre_map, stride), pre_map, protos, cfg.denominator
            )
        else:
            m_feat_pre = torch.ones_like(q_cur)
        pseudo = blend_batch(probs_cur, probs_pre, m_feat_pre)
        stats["blend_changed"] = float((pseudo != probs_cur.argmax(dim=1)).float().mean())
        if cfg.soft_labels:
            gate = (q_pre > q_cur).float() * m_feat_pre
            soft = probs_cur + gate.unsqueeze(1) * probs_pre
            pseudo = soft / soft.sum(dim=1, keepdim=True)
    else:
        pseudo = probs_cur if cfg.soft_labels else probs_cur.argmax(dim=1)
    hard = pseudo.argmax(dim=1) if pseudo.dtype.is_floating_point else pseudo

    weight = torch.ones_like(q_cur)
    if flags.use_model_mask and q_pre is not None:
        m_mod = model_level_mask(q_cur, q_pre, alpha)
        stats["m_mod"] = float(m_mod.mean())
        weight = weight * m_mod
    if flags.use_feature_mask and flags.with_source:
        m_feat = feature_level_mask_batch(feat_cur, downsample_labels(hard, stride), hard, protos, cfg.denominator)
        stats["m_feat"] = float(m_feat.mean())
        weight = weight * m_feat

    composed = x_t
    if flags.use_replay and vectors:
        composed = np.stack(
            [replay_all(x_t[b], vectors, cfg.compose_params, _substream(rng, b))[0] for b in range(len(x_t))]
        )
    if cfg.class_mix and source_batch is not None:
        composed, pseudo, weight = class_mix(composed, pseudo, weight, *source_batch, rng)
    stats["weight"] = float(weight.mean())
    return IterationTerms(to_tensor(composed), pseudo, weight, stats)


def class_mix(composed, pseudo, weight, x_s, y_s, rng):
    """Paste half of each source crop's classes onto the target input.

    Pasted pixels take the ground-truth source label at full weight; the rest
    keep the target pseudo-label and weight.
    """
    composed = composed.copy()
    pseudo, weight = pseudo.clone(), weight.clone()
    C = pseudo.shape[1] if pseudo.dtype.is_floating_point else None
    for b in range(len(composed)):
        present = np.unique(y_s[b])
        chosen = rng.choice(present, size=(len(present) + 1) // 2, replace=False)
        m = np.isin(y_s[b], chosen)
        composed[b][m] = x_s[b][m]
        mt = torch.from_numpy(m)
        lab = _labels_tensor(y_s[b])
        if C is None:
            pseudo[b][mt] = lab[mt]
        else:
            pseudo[b][:, mt] = F.one_hot(lab[mt], C).T.to(pseudo.dtype)
        weight[b][mt] = 1.0
    return composed, pseudo, weight


def _substream(rng: np.random.Generator, index: int) -> np.random.Generator:
    return np.random.default_rng([int(rng.integers(2**62)), index])


def weighted_target_loss(student: SegmentationModel, terms: IterationTerms) -> torch.Tensor:
    ce = cross_entropy_map(student(terms.composed), terms.pseudo)
    return (terms.weight * ce).mean()


def step_loss(student: SegmentationModel, terms: IterationTerms, source_batch=None):
    """Total loss and its (source, target) parts for one iteration."""
    loss_t = weighted_target_loss(student, terms)
    if source_batch is None:
        return loss_t, torch.zeros((), dtype=loss_t.dtype), loss_t
    x_s, y_s = source_batch
    xs = x_s if torch.is_tensor(x_s) else to_tensor(x_s).to(terms.composed.dtype)
    loss_s = F.cross_entropy(student(xs), _labels_tensor(np.asarray(y_s)))
    return loss_s + loss_t, loss_s, loss_t


def adapt_step(
    ensemble: TeacherEnsemble,
    target: ArrayDataset,
    source: Optional[ArrayDataset],
    stored_vectors: list[WeatherVector],
    protos: ClassPrototypes,
    cfg: StepConfig,
    on_log: Callable[[dict], None] | None = None,
) -> StepArtifacts:
    """Adapt ``ensemble`` to one target domain; updates student, teacher and ``protos`` in place."""
    n = cfg.step_index
    flags = cfg.flags
    if n >= 2 and ensemble.previous_teacher is None:
        raise MissingArtifactsError(f"step {n} needs the previous step's teacher")
    if n >= 2 and flags.use_replay and len(stored_vectors) < n - 1:
        raise MissingArtifactsError(f"step {n} needs {n - 1} stored weather vectors, got {len(stored_vectors)}")
    if flags.with_source and (source is None or source.labels is None):
        raise ValueError("with_source=True needs a labelled source dataset")
    prev_digest = parameter_digest(ensemble.previous_teacher) if ensemble.previous_teacher is not None else None

    vectors = list(stored_vectors[: n - 1])
    ensemble.ema_decay = cfg.ema_decay
    student = ensemble.student
    student.train()
    opt = torch.optim.SGD(student.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    crop = min(cfg.crop_size, *target.images.shape[1:3])
    weather = WeatherVector.empty(target.domain, (crop, crop))
    records = []

    for it in range(cfg.iters):
        rng = _step_rng(cfg.seed, n, it)
        alpha = alpha_at(cfg.alpha_schedule, it)
        x_t, _ = sample_batch(target, cfg.batch_size, crop, rng, with_labels=False)
        src = sample_batch(source, cfg.batch_size, crop, rng) if flags.with_source else None
        terms = target_terms(ensemble, x_t, protos, vectors, cfg, alpha, rng, src)

        loss, loss_s, loss_t = step_loss(student, terms, src)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"step {n} iteration {it}: loss {loss.item()} (source {loss_s.item()}, target {loss_t.item()})"
            )
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema_update(ensemble)

        if flags.with_source:
            x_s, y_s = src
            with torch.no_grad():
                feats = ensemble.teacher.features(to_tensor(x_s))
            ys_low = downsample_labels(_labels_tensor(y_s), ensemble.teacher.arch.stride)
            update_source_prototypes_batch(protos, feats, ys_low)
        for img in x_t:
            accumulate_weather(weather, img)

        if it % cfg.log_every == 0 or it == cfg.iters - 1:
            rec = {
                "step": n,
                "iter": it,
                "loss": float(loss.detach()),
                "loss_source": float(loss_s.detach()),
                "loss_target": float(loss_t.detach()),
                "alpha": alpha,
                **terms.stats,
            }
            records.append(rec)
            if on_log is not None:
                on_log(rec)

    if prev_digest is not None and parameter_digest(ensemble.previous_teacher) != prev_digest:
        raise RuntimeError("previous teacher was modified during adaptation")
    return StepArtifacts(student, ensemble.teacher, weather, protos.copy(), records)


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def evaluate(model: SegmentationModel, ds: ArrayDataset, batch_size: int = 10) -> tuple[np.ndarray, float]:
    """Per-class IoU and mIoU (%) of ``model`` on a labelled dataset."""
    if ds.labels is None:
        raise ValueError("evaluation needs labels")
    model.eval()
    C = model.arch.num_classes
    cm = np.zeros((C, C), dtype=np.int64)
    for start in range(0, len(ds), batch_size):
        x = to_tensor(ds.images[start : start + batch_size])
        pred = model(x).argmax(dim=1).numpy()
        cm += confusion_matrix(pred, ds.labels[start : start + batch_size], C)
    return iou_scores(cm)


# ---------------------------------------------------------------- persistence


def save_protos(protos: ClassPrototypes, path) -> None:
    write_container(
        path,
        PROTOS_KIND,
        {"num_classes": protos.num_classes, "dim": int(protos.sr.shape[1]), "ema_decay_proto": protos.ema_decay_proto},
        {"sr": protos.sr.numpy(), "count": protos.count.numpy().astype(np.float32)},
    )


def load_protos(path) -> ClassPrototypes:
    meta, blocks = read_container(path, kind=PROTOS_KIND)
    p = ClassPrototypes(meta["num_classes"], meta["dim"], meta["ema_decay_proto"])
    p.sr = torch.from_numpy(blocks["sr"])
    p.count = torch.from_numpy(blocks["count"].astype(np.int64))
    return p


def write_log(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def step_config_for(base: StepConfig, step_index: int, **overrides) -> StepConfig:
    cfg = replace(base, step_index=step_index, **overrides)
    if cfg.alpha_schedule.total_iters != max(cfg.iters, 1):
        a = cfg.alpha_schedule
        cfg = replace(cfg, alpha_schedule=AlphaSchedule(a.alpha_start, a.alpha_end, max(cfg.iters, 1)))
    return cfg

