"""Run configuration, run-directory layout and the multi-step protocol."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import DEFAULT_SEQUENCE, ArrayDataset, Manifest, load_split, synthesize_split
from .masks import AlphaSchedule, ClassPrototypes
from .metrics import MetricMatrix
from .model import ArchDescriptor, SegmentationModel, TeacherEnsemble, load_checkpoint, save_checkpoint
from .replay import ComposeParams, WeatherVector
from .trainer import (
    ABLATIONS,
    Flags,
    StepConfig,
    adapt_step,
    evaluate,
    load_protos,
    save_protos,
    train_source,
    write_log,
)

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "SEQWEATHER_RUN_ROOT"
CONFIG_NAME = "config.json"
METRICS_NAME = "metrics.json"
STEP_FILES = ("student.ckpt", "teacher.ckpt", "weather.wv", "protos.pt0", "log.jsonl")


class ResumeMismatchError(RuntimeError):
    pass


@dataclass
class RunConfig:
    """Flat run configuration; its canonical JSON form is hashed to name the run."""

    seed: int = 0
    manifest: str = ""
    steps: list = field(default_factory=lambda: list(DEFAULT_SEQUENCE))
    ablation: str = "full"
    with_source: bool = True
    iters: int = 300
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    ema_decay: float = 0.99
    proto_decay: float = 0.99
    alpha_start: float = 0.8
    alpha_end: float = 0.2
    sigma_min: float = 0.2
    sigma_max: float = 1.2
    area_min: float = 1 / 3
    area_max: float = 1 / 2
    crop_size: int = 64
    denominator: str = "literal"
    soft_labels: bool = False
    class_mix: bool = True
    source_iters: int = 1500
    source_lr: float = 0.05
    source_batch_size: int = 8
    source_checkpoint: str = ""
    log_every: int = 25
    step_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.steps)) != len(self.steps):
            raise ValueError(f"domain tags must be unique: {self.steps}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {sorted(ABLATIONS)}")

    @property
    def flags(self) -> Flags:
        return replace(ABLATIONS[self.ablation], with_source=self.with_source)

    def canonical(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        d = asdict(self)
        d["config_hash"] = self.digest()
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known - {"config_hash"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def step_config(self, step_index: int) -> StepConfig:
        tag = self.steps[step_index - 1]
        over = dict(self.step_overrides.get(tag, {}))
        iters = int(over.pop("iters", self.iters))
        base = dict(
            step_index=step_index,
            iters=iters,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            alpha_schedule=AlphaSchedule(self.alpha_start, self.alpha_end, max(iters, 1)),
            compose_params=ComposeParams((self.sigma_min, self.sigma_max), (self.area_min, self.area_max)),
            flags=self.flags,
            crop_size=self.crop_size,
            ema_decay=self.ema_decay,
            denominator=self.denominator,
            soft_labels=self.soft_labels,
            class_mix=self.class_mix,
            log_every=self.log_every,
            seed=self.seed,
        )
        base.update(over)
        return StepConfig(**base)


@dataclass
class SequenceData:
    source_train: ArrayDataset
    source_val: ArrayDataset
    target_train: dict[str, ArrayDataset]
    target_val: dict[str, ArrayDataset]

    @classmethod
    def from_manifest(cls, manifest: Manifest, steps) -> "SequenceData":
        missing = [s for s in steps if s not in manifest.domains]
        if missing:
            raise ValueError(f"manifest lacks domains {missing}")
        return cls(
            load_split(manifest, "source", "train"),
            load_split(manifest, "source", "val"),
            {d: load_split(manifest, d, "train", with_labels=False) for d in steps},
            {d: load_split(manifest, d, "val") for d in steps},
        )

    @classmethod
    def synthetic(cls, seed: int, steps, sizes: dict) -> "SequenceData":
        """Same content as a written benchmark, generated in memory."""
        tt = {}
        for d in steps:
            ds = synthesize_split(seed, d, "train", sizes["target_train"])
            tt[d] = ArrayDataset(ds.images, None, d)
        return cls(
            synthesize_split(seed, "source", "train", sizes["source_train"]),
            synthesize_split(seed, "source", "val", sizes["source_val"]),
            tt,
            {d: synthesize_split(seed, d, "val", sizes["target_val"]) for d in steps},
        )


def resolve_run_dir(path) -> Path:
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True)


def source_model(cfg: RunConfig, data: SequenceData, arch: ArchDescriptor | None = None) -> SegmentationModel:
    """Step-0 model: the supplied source checkpoint, or a fresh source-trained one."""
    if cfg.source_checkpoint:
        return load_checkpoint(cfg.source_checkpoint, arch)
    seed_everything(cfg.seed)
    model = SegmentationModel(arch or ArchDescriptor())
    return train_source(
        model,
        data.source_train,
        cfg.source_iters,
        batch_size=cfg.source_batch_size,
        lr=cfg.source_lr,
        crop=cfg.crop_size,
        seed=cfg.seed,
    )


def _step_complete(step_dir: Path) -> bool:
    return all((step_dir / f).exists() for f in STEP_FILES) and (step_dir / "done").exists()


def run_sequence(cfg: RunConfig, data: SequenceData, out_dir, resume: bool = False, on_log=None) -> MetricMatrix:
    """Adapt to ``cfg.steps`` in order, evaluating every seen target after each step.

    Artifacts land in ``out_dir/step_k``; ``out_dir/metrics.json`` holds the matrix.
    With ``resume``, completed steps are reloaded instead of retrained, provided
    the stored config hash matches.
    """
    out = Path(out_dir)
    cfg_path = out / CONFIG_NAME
    if cfg_path.exists():
        stored = json.loads(cfg_path.read_text()).get("config_hash")
        if stored != cfg.digest():
            raise ResumeMismatchError(f"{out} was created with config {stored}, this config is {cfg.digest()}")
        if not resume:
            for child in out.glob("step_*"):
                shutil.rmtree(child)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(cfg_path)

    K = len(cfg.steps)
    metrics = MetricMatrix.empty(cfg.steps)
    metrics_path = out / METRICS_NAME
    step0 = out / "step_0" / "source.ckpt"
    if resume and step0.exists():
        student = load_checkpoint(step0)
    else:
        student = source_model(cfg, data)
        step0.parent.mkdir(exist_ok=True)
        save_checkpoint(student, step0)
    ensemble = TeacherEnsemble.from_student(student, cfg.ema_decay)
    protos = ClassPrototypes(student.arch.num_classes, student.arch.feature_dim, cfg.proto_decay)
    vectors: list[WeatherVector] = []
    if resume and metrics_path.exists():
        old = MetricMatrix.load(metrics_path)
        if old.targets == cfg.steps:
            metrics = old

    for k in range(1, K + 1):
        tag = cfg.steps[k - 1]
        step_dir = out / f"step_{k}"
        if k >= 2:
            ensemble.begin_next_step()
        if resume and _step_complete(step_dir) and all(metrics.miou[j][k - 1] is not None for j in range(k)):
            ensemble.student = load_checkpoint(step_dir / "student.ckpt")
            ensemble.teacher = load_checkpoint(step_dir / "teacher.ckpt")
            for p in ensemble.teacher.parameters():
                p.requires_grad_(False)
            protos = load_protos(step_dir / "protos.pt0")
            vectors.append(WeatherVector.load(step_dir / "weather.wv"))
            log.info("step %d (%s): reusing stored artifacts", k, tag)
            continue

        shutil.rmtree(step_dir, ignore_errors=True)
        step_dir.mkdir(parents=True)
        step_cfg = cfg.step_config(k)
        seed_everything(cfg.seed * 1000 + k)
        log.info("step %d (%s): %d iterations, flags %s", k, tag, step_cfg.iters, step_cfg.flags)
        art = adapt_step(
            ensemble,
            data.target_train[tag],
            data.source_train if cfg.with_source else None,
            vectors,
            protos,
            step_cfg,
            on_log=on_log,
        )
        vectors.append(art.weather)
        save_checkpoint(art.student, step_dir / "student.ckpt")
        save_checkpoint(art.teacher, step_dir / "teacher.ckpt")
        art.weather.save(step_dir / "weather.wv")
        save_protos(art.protos, step_dir / "protos.pt0")
        write_log(art.log, step_dir / "log.jsonl")

        for j in range(k):
            per_class, miou = evaluate(ensemble.teacher, data.target_val[cfg.steps[j]])
            metrics.record(j, k - 1, miou, per_class)
            log.info("  after step %d: %s mIoU %.1f", k, cfg.steps[j], miou)
        metrics.save(metrics_path)
        (step_dir / "done").write_text("ok\n")

    metrics.save(metrics_path)
    return metrics
