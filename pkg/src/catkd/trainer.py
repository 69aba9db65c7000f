"""Training loops: CE, pure CAT, CAT-KD, logit KD, and linear probing.

All loops share one SGD/multi-step schedule and are deterministic given the
schedule seed.  Teachers are frozen copies in eval mode; their CAMs are
computed without gradients, so only the student side of the CAT loss is
differentiated.
"""

from __future__ import annotations

import logging
import math
import random
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .data import ArrayDataset, LabelFreeView, augment, iterate
from .errors import ConfigError, DivergenceError, HeadShapeError
from .heads import gap
from .losses import DistillConfig, cat_loss, ce_loss, kd_baseline_loss
from .models import CamClassifier, frozen_copy
from .persistence import MetricRecord, save_checkpoint, write_metrics

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple = ()
    gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigError("schedule.epochs must be >= 0 and schedule.batch_size > 0")
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m >= self.epochs or m <= 0 for m in ms):
            raise ConfigError(f"schedule.milestones: must be strictly increasing and inside (0, epochs), got {ms}")

    def to_dict(self):
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


SCHEDULE_PRESETS = {
    "cifar": TrainSchedule(240, 64, 0.05, milestones=(150, 180, 210)),
    "cifar-mobile": TrainSchedule(240, 64, 0.01, milestones=(150, 180, 210)),
    "cat-exploration": TrainSchedule(240, 128, 0.05, milestones=(150, 180, 210)),
    "imagenet": TrainSchedule(100, 512, 0.2, weight_decay=1e-4, milestones=(30, 60, 90)),
    "probe": TrainSchedule(40, 128, 0.1, weight_decay=0.0, milestones=(10, 20, 30)),
    "synthetic-teacher": TrainSchedule(15, 64, 0.05, milestones=(10,)),
    "synthetic-student": TrainSchedule(20, 64, 0.05, milestones=(15,)),
}


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def accuracy(model: nn.Module, dataset: ArrayDataset, batch_size: int = 256) -> float:
    """Top-1 accuracy (percent) in eval mode; restores the previous mode."""
    return evaluate(model, dataset, batch_size)[0]


@torch.no_grad()
def evaluate(model: nn.Module, dataset: ArrayDataset, batch_size: int = 256):
    """``(top1 percent, mean CE)`` on ``dataset``."""
    was_training = model.training
    model.eval()
    correct, loss, n = 0, 0.0, len(dataset)
    for idx in iterate(n, batch_size):
        logits = model(dataset.images[idx])
        y = dataset.labels[idx]
        correct += int((logits.argmax(-1) == y).sum())
        loss += float(ce_loss(logits, y)) * len(idx)
    model.train(was_training)
    if n == 0:
        return float("nan"), float("nan")
    return 100.0 * correct / n, loss / n


class _Run:
    """Bookkeeping shared by every loop: optimizer, schedule, records, checkpoints."""

    def __init__(self, model, schedule, run_id, run_dir, eval_sets, params=None):
        self.model = model
        self.schedule = schedule
        self.run_id = run_id
        self.run_dir = Path(run_dir) if run_dir else None
        self.eval_sets = eval_sets or {}
        params = [p for p in (params if params is not None else model.parameters()) if p.requires_grad]
        self.opt = torch.optim.SGD(params, lr=schedule.lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay)
        self.sched = torch.optim.lr_scheduler.MultiStepLR(self.opt, list(schedule.milestones), schedule.gamma)
        self.records = []
        self.best = -math.inf

    def step(self, loss):
        if not torch.isfinite(loss):
            self._fail(f"non-finite loss {float(loss.detach())}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()

    def _fail(self, why):
        if self.run_dir:
            write_metrics(self.run_dir / "metrics.tsv", self.records)
        raise DivergenceError(f"{self.run_id}: {why}", self.records)

    def end_epoch(self, epoch, sums, count, started):
        self.sched.step()
        elapsed = time.perf_counter() - started
        means = {k: v / max(count, 1) for k, v in sums.items()}
        rec = MetricRecord(self.run_id, epoch, "train", wall_clock=elapsed, **means)
        self.records.append(rec)
        if not rec.is_finite():
            self._fail(f"non-finite training metrics at epoch {epoch}")
        main_acc = None
        for name, ds in self.eval_sets.items():
            top1, ce = evaluate(self.model, ds)
            self.records.append(MetricRecord(self.run_id, epoch, name, ce=ce, top1=top1))
            if main_acc is None:
                main_acc = top1
        log.info("%s epoch %d %s eval=%s", self.run_id, epoch, means, main_acc)
        if self.run_dir:
            write_metrics(self.run_dir / "metrics.tsv", self.records)
            save_checkpoint(self.run_dir / "last.pt", self.model, self.schedule)
            if main_acc is not None and main_acc > self.best:
                self.best = main_acc
                save_checkpoint(self.run_dir / "best.pt", self.model, self.schedule)


def _loop(model, images, schedule, step_fn, run, augmentation="none", setup_seconds=0.0):
    """Run ``schedule.epochs`` epochs; ``step_fn(x, idx)`` returns a dict of loss tensors incl. ``total``.

    ``setup_seconds`` (e.g. building a teacher cache) is charged to the first epoch's wall clock.
    """
    seed_everything(schedule.seed)
    order_gen = torch.Generator().manual_seed(schedule.seed)
    aug_gen = torch.Generator().manual_seed(schedule.seed + 1)
    n = len(images)
    for epoch in range(1, schedule.epochs + 1):
        model.train()
        started = time.perf_counter() - (setup_seconds if epoch == 1 else 0.0)
        sums, count = {}, 0
        for idx in iterate(n, schedule.batch_size, order_gen):
            x = images[idx]
            if augmentation == "standard-crop-flip":
                x = augment(x, aug_gen)
            parts = step_fn(x, idx)
            run.step(parts["total"])
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * len(idx)
            count += len(idx)
        run.end_epoch(epoch, sums, count, started)
    return run.records


def train_ce(model: CamClassifier, data: ArrayDataset, schedule: TrainSchedule, eval_sets=None,
             run_id="ce", run_dir=None, augmentation="none"):
    """Plain cross-entropy training; works with either head form."""
    run = _Run(model, schedule, run_id, run_dir, eval_sets)
    labels = data.labels

    def step(x, idx):
        loss = ce_loss(model(x), labels[idx])
        return {"ce": loss, "total": loss}

    records = _loop(model, data.images, schedule, step, run, augmentation)
    return model, records


class _TeacherCams:
    """Teacher CAMs/logits for a batch, optionally precomputed when inputs are not augmented."""

    def __init__(self, teacher, images=None, batch_size=256):
        self.teacher = teacher
        self.cache = None
        self.build_seconds = 0.0
        if images is not None:
            started = time.perf_counter()
            logits, cams = [], []
            with torch.no_grad():
                for idx in iterate(len(images), batch_size):
                    lg, cm = teacher.forward_cams(images[idx], producer="teacher")
                    logits.append(lg)
                    cams.append(cm.data)
            self.cache = (torch.cat(logits), torch.cat(cams))
            self.build_seconds = time.perf_counter() - started

    def __call__(self, x, idx):
        from .cam import CamStack

        if self.cache is not None:
            return self.cache[0][idx], CamStack(self.cache[1][idx], producer="teacher")
        with torch.no_grad():
            return self.teacher.forward_cams(x, producer="teacher")


def _prepare_pair(teacher, student):
    if teacher.num_classes != student.num_classes:
        raise HeadShapeError(f"teacher has {teacher.num_classes} categories, student {student.num_classes}")
    teacher = frozen_copy(teacher).convert()
    student.convert()
    return teacher, student


def train_cat(teacher: CamClassifier, student: CamClassifier, data, schedule: TrainSchedule, cfg: DistillConfig,
              eval_sets=None, run_id="cat", run_dir=None, augmentation="none", cache_teacher=False):
    """Train ``student`` by matching the teacher's CAMs only.

    ``data`` is reduced to a :class:`LabelFreeView`; labels never enter the
    loop.  Normalization is mandatory here, since un-normalized CAMs would
    reveal the teacher's prediction scores.
    """
    if cfg.normalize_rule != "always" or cfg.transform.norm == "none":
        raise ConfigError("pure CAT requires normalization (distill.normalize_rule=always, transform.norm l1/l2)")
    view = data if isinstance(data, LabelFreeView) else LabelFreeView(data)
    teacher, student = _prepare_pair(teacher, student)
    cached = cache_teacher and augmentation == "none"
    tcams = _TeacherCams(teacher, view.images if cached else None)
    run = _Run(student, schedule, run_id, run_dir, eval_sets)

    def step(x, idx):
        t_logits, t_cams = tcams(x, idx)
        _, s_cams = student.forward_cams(x, producer="student")
        loss = cat_loss(t_cams, s_cams, cfg, t_logits)
        return {"cat": loss, "total": loss}

    records = _loop(student, view.images, schedule, step, run, augmentation, tcams.build_seconds)
    return student, records


def train_catkd(teacher: CamClassifier, student: CamClassifier, data: ArrayDataset, schedule: TrainSchedule,
                cfg: DistillConfig, eval_sets=None, run_id="catkd", run_dir=None, augmentation="none",
                cache_teacher=False):
    """Cross-entropy plus ``beta`` times the CAT loss; ``cfg`` must already be resolved."""
    cfg.norm_order  # raises for an unresolved 'auto' rule
    teacher, student = _prepare_pair(teacher, student)
    cached = cache_teacher and augmentation == "none"
    tcams = _TeacherCams(teacher, data.images if cached else None)
    run = _Run(student, schedule, run_id, run_dir, eval_sets)
    labels = data.labels

    def step(x, idx):
        t_logits, t_cams = tcams(x, idx)
        logits, s_cams = student.forward_cams(x, producer="student")
        ce = ce_loss(logits, labels[idx])
        cat = cat_loss(t_cams, s_cams, cfg, t_logits)
        return {"ce": ce, "cat": cat, "total": ce + cfg.beta * cat}

    records = _loop(student, data.images, schedule, step, run, augmentation, tcams.build_seconds)
    return student, records


def train_kd(teacher: CamClassifier, student: CamClassifier, data: ArrayDataset, schedule: TrainSchedule,
             cfg: DistillConfig, eval_sets=None, run_id="kd", run_dir=None, augmentation="none"):
    """Temperature-scaled logit distillation baseline."""
    teacher = frozen_copy(teacher)
    run = _Run(student, schedule, run_id, run_dir, eval_sets)
    labels = data.labels

    def step(x, idx):
        with torch.no_grad():
            t_logits = teacher(x)
        logits = student(x)
        y = labels[idx]
        ce = ce_loss(logits, y)
        total = kd_baseline_loss(logits, t_logits, y, cfg.temperature, cfg.kd_weight)
        return {"ce": ce, "kd": total - ce, "total": total}

    records = _loop(student, data.images, schedule, step, run, augmentation)
    return student, records


@torch.no_grad()
def extract_features(model: CamClassifier, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    """Globally pooled final-convolution features in eval mode."""
    was_training = model.training
    model.eval()
    out = [gap(model.features(images[idx])) for idx in iterate(len(images), batch_size)]
    model.train(was_training)
    return torch.cat(out) if out else torch.zeros(0, model.backbone.out_channels)


def linear_probe(extractor: CamClassifier, train: ArrayDataset, test: ArrayDataset,
                 schedule: TrainSchedule = SCHEDULE_PRESETS["probe"], run_id="probe"):
    """Train a fresh zero-initialised linear head on frozen pooled features.

    Returns ``(test accuracy percent, head, records)``.
    """
    if train.images.shape[1:] != test.images.shape[1:]:
        raise HeadShapeError("probe train and test images differ in shape")
    seed_everything(schedule.seed)
    f_train = extract_features(extractor, train.images)
    f_test = extract_features(extractor, test.images)
    if f_train.shape[1] != extractor.backbone.out_channels:
        raise HeadShapeError("feature dimension does not match the extractor")
    head = nn.Linear(f_train.shape[1], train.num_classes)
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    probe_train = ArrayDataset(f_train, train.labels, train.num_classes, train.ids)
    probe_test = ArrayDataset(f_test, test.labels, test.num_classes, test.ids)
    head, records = train_ce(_LinearHead(head), probe_train, schedule, {"test": probe_test}, run_id=run_id)
    acc = evaluate(head, probe_test)[0]
    return acc, head.layer, records


class _LinearHead(nn.Module):
    """Wraps a bare linear layer so the generic CE loop can drive it."""

    def __init__(self, layer: nn.Linear):
        super().__init__()
        self.layer = layer

    def forward(self, x):
        return self.layer(x)
