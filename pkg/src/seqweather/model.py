"""Segmentation network, teacher roles and checkpoint persistence."""
from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import (
    CorruptContainerError,
    DescriptorMismatchError,
    read_container,
    write_container,
)

CHECKPOINT_KIND = "segmentation-model"


class InputShapeError(ValueError):
    """Input image does not match what the architecture accepts."""


@dataclass(frozen=True)
class ArchDescriptor:
    encoder_widths: tuple[int, ...] = (16, 32, 64)
    decoder_widths: tuple[int, ...] = (32, 32)
    num_classes: int = 5
    stride: int = 4
    decoder_dilations: tuple[int, ...] = (2, 4)

    def __post_init__(self):
        if self.decoder_dilations and len(self.decoder_dilations) != len(self.decoder_widths):
            raise ValueError("decoder_dilations needs one entry per decoder layer")

    @property
    def feature_dim(self) -> int:
        return self.encoder_widths[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchDescriptor":
        return cls(
            encoder_widths=tuple(d["encoder_widths"]),
            decoder_widths=tuple(d["decoder_widths"]),
            num_classes=int(d["num_classes"]),
            stride=int(d["stride"]),
            decoder_dilations=tuple(d.get("decoder_dilations", ())),
        )


class SegmentationModel(nn.Module):
    """Three-stage conv encoder (stride 1, 2, 2) and a bilinear-upsampling decoder.

    ``features`` returns the last encoder stage, an (H/4)x(W/4)xD map with
    D = ``encoder_widths[-1]``.
    """

    def __init__(self, arch: ArchDescriptor | None = None):
        super().__init__()
        self.arch = arch or ArchDescriptor()
        if len(self.arch.encoder_widths) != 3 or self.arch.stride != 4:
            raise ValueError("encoder must have 3 stages with an overall stride of 4")
        w = self.arch.encoder_widths
        self.encoder = nn.ModuleList(
            [
                nn.Conv2d(3, w[0], 3, padding=1),
                nn.Conv2d(w[0], w[1], 3, stride=2, padding=1),
                nn.Conv2d(w[1], w[2], 3, stride=2, padding=1),
            ]
        )
        dec = []
        prev = w[2]
        dil = self.arch.decoder_dilations or (1,) * len(self.arch.decoder_widths)
        for width, d in zip(self.arch.decoder_widths, dil):
            dec.append(nn.Conv2d(prev, width, 3, padding=d, dilation=d))
            prev = width
        self.decoder = nn.ModuleList(dec)
        self.classifier = nn.Conv2d(prev, self.arch.num_classes, 1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        h = x - 0.5
        for conv in self.encoder:
            h = F.relu(conv(h))
        return h

    def head(self, feats: torch.Tensor, out_size) -> torch.Tensor:
        h = feats
        for conv in self.decoder:
            h = F.relu(conv(h))
        return F.interpolate(self.classifier(h), size=out_size, mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x), x.shape[-2:])

    def forward_with_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.features(x)
        return self.head(f, x.shape[-2:]), f

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise InputShapeError(f"expected Bx3xHxW input, got {tuple(x.shape)}")
        s = self.arch.stride
        if x.shape[2] % s or x.shape[3] % s:
            raise InputShapeError(f"image size {tuple(x.shape[2:])} not divisible by stride {s}")


def to_tensor(images) -> torch.Tensor:
    """HxWx3 or BxHxWx3 array in [0, 1] -> Bx3xHxW float tensor."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != 3:
        raise InputShapeError(f"expected HxWx3 image(s), got shape {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))


@torch.no_grad()
def forward_probs(model: SegmentationModel, image) -> np.ndarray:
    """Per-pixel softmax of ``model`` on one HxWx3 image, returned as HxWxC."""
    x = to_tensor(image).to(next(model.parameters()).dtype)
    model.check_input(x)
    probs = torch.softmax(model(x), dim=1)
    return probs[0].permute(1, 2, 0).numpy()


def confidence_from_probs(probs: torch.Tensor, dim: int = 1) -> torch.Tensor:
    return probs.max(dim=dim).values


def confidence(model: SegmentationModel, image) -> np.ndarray:
    """Per-pixel maximum class probability, shape HxW."""
    return forward_probs(model, image).max(axis=-1)


@dataclass
class TeacherEnsemble:
    student: SegmentationModel
    teacher: SegmentationModel
    previous_teacher: Optional[SegmentationModel] = None
    ema_decay: float = 0.999

    @classmethod
    def from_student(cls, student: SegmentationModel, ema_decay: float = 0.999) -> "TeacherEnsemble":
        teacher = copy.deepcopy(student)
        freeze(teacher)
        return cls(student=student, teacher=teacher, ema_decay=ema_decay)

    def begin_next_step(self) -> None:
        """Snapshot the current teacher as the frozen previous teacher."""
        prev = copy.deepcopy(self.teacher)
        freeze(prev)
        self.previous_teacher = prev


def freeze(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model


@torch.no_grad()
def ema_update(ensemble: TeacherEnsemble) -> TeacherEnsemble:
    """teacher <- d * teacher + (1 - d) * student, element-wise.

    Computed as a lerp so that teacher == student and d == 0 are exact.
    """
    d = ensemble.ema_decay
    t_params = list(ensemble.teacher.parameters())
    s_params = list(ensemble.student.parameters())
    if len(t_params) != len(s_params):
        raise CorruptContainerError("teacher and student have different parameter counts")
    for t, s in zip(t_params, s_params):
        if t.shape != s.shape:
            raise CorruptContainerError(f"parameter shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        t.lerp_(s.detach(), 1.0 - d)
    return ensemble


def param_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {name: p.detach().cpu().numpy() for name, p in model.named_parameters()}


def save_checkpoint(model: SegmentationModel, path, extra: dict | None = None) -> None:
    meta = {"arch": model.arch.to_dict(), **(extra or {})}
    write_container(path, CHECKPOINT_KIND, meta, param_arrays(model))


def load_checkpoint(path, arch: ArchDescriptor | None = None) -> SegmentationModel:
    """Rebuild a model from ``path``; ``arch`` (if given) must match the stored descriptor."""
    meta, blocks = read_container(path, kind=CHECKPOINT_KIND)
    stored = ArchDescriptor.from_dict(meta["arch"])
    if arch is not None and arch != stored:
        raise DescriptorMismatchError(f"checkpoint architecture {stored} does not match {arch}")
    model = SegmentationModel(stored)
    named = dict(model.named_parameters())
    if set(named) != set(blocks):
        raise CorruptContainerError("parameter names do not match architecture")
    with torch.no_grad():
        for name, p in named.items():
            if tuple(blocks[name].shape) != tuple(p.shape):
                raise CorruptContainerError(f"block {name} has shape {blocks[name].shape}")
            p.copy_(torch.from_numpy(blocks[name]))
    return model


def parameter_digest(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
