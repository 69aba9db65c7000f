"""CAT loss, the CAT-KD composite, cross-entropy and a logit-distillation baseline."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import torch
import torch.nn.functional as F

from .cam import CamStack
from .errors import ConfigError, IncompatibleStacksError, LabelError
from .transforms import TransformConfig, prepare_cams, subset_mask

NORMALIZE_RULES = ("always", "never", "auto")


@dataclass(frozen=True)
class DistillConfig:
    beta: float = 0.0
    transform: TransformConfig = field(default_factory=TransformConfig)
    normalize_rule: str = "always"
    temperature: float = 4.0
    kd_weight: float = 0.9

    def __post_init__(self):
        if self.beta < 0:
            raise ConfigError("distill.beta: must be >= 0")
        if self.normalize_rule not in NORMALIZE_RULES:
            raise ConfigError(f"distill.normalize_rule: expected one of {NORMALIZE_RULES}, got {self.normalize_rule!r}")
        if not self.temperature > 0:
            raise ConfigError("distill.temperature: must be > 0")
        if isinstance(self.transform, dict):
            object.__setattr__(self, "transform", TransformConfig(**self.transform))

    def resolve(self, teacher_family: str, student_family: str) -> "DistillConfig":
        """Replace the ``auto`` rule: normalize only when the architectures differ."""
        if self.normalize_rule != "auto":
            return self
        return replace(self, normalize_rule="always" if teacher_family != student_family else "never")

    @property
    def norm_order(self) -> str:
        if self.normalize_rule == "auto":
            raise ConfigError("distill.normalize_rule 'auto' must be resolved before computing losses")
        return self.transform.norm if self.normalize_rule == "always" else "none"

    def to_dict(self):
        return {
            "beta": self.beta,
            "transform": self.transform.to_dict(),
            "normalize_rule": self.normalize_rule,
            "temperature": self.temperature,
            "kd_weight": self.kd_weight,
        }


# Suggested beta per (teacher, student) zoo pair.
BETA_PRESETS = {
    ("resnet56", "resnet20"): 50.0,
    ("resnet110", "resnet32"): 50.0,
    ("wrn-40-2", "wrn-16-2"): 100.0,
    ("wrn-40-2", "wrn-40-1"): 100.0,
    ("resnet32x4", "resnet8x4"): 600.0,
    ("vgg13", "vgg8"): 50.0,
    ("tiny-cnn", "tiny-cnn"): 10.0,
}


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy averaged over the batch."""
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k}), got range [{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


def kd_baseline_loss(student_logits, teacher_logits, labels, temperature=4.0, weight=0.9):
    """``CE + weight * T^2 * KL(softmax(t/T) || softmax(s/T))``, KL averaged over the batch."""
    if not temperature > 0:
        raise ConfigError("temperature must be > 0")
    ce = ce_loss(student_logits, labels)
    log_p_s = F.log_softmax(student_logits / temperature, dim=-1)
    log_p_t = F.log_softmax(teacher_logits / temperature, dim=-1)
    kl = F.kl_div(log_p_s, log_p_t, reduction="batchmean", log_target=True)
    return ce + weight * temperature**2 * kl


def _check_pair(teacher: CamStack, student: CamStack):
    if teacher.data.shape != student.data.shape:
        raise IncompatibleStacksError(
            f"teacher CAMs {tuple(teacher.data.shape)} and student CAMs {tuple(student.data.shape)} differ in shape"
        )
    if teacher.pooled != student.pooled or teacher.normalized != student.normalized:
        raise IncompatibleStacksError(
            f"teacher (pooled={teacher.pooled}, norm={teacher.normalized}) and student "
            f"(pooled={student.pooled}, norm={student.normalized}) were transformed differently"
        )
    if student.binarized:
        raise IncompatibleStacksError("student CAMs must not be binarized")


def cat_loss(teacher: CamStack, student: CamStack, cfg: DistillConfig, teacher_logits: Optional[torch.Tensor] = None):
    """Mean over the batch of ``(1/K) * sum_i ||n(phi(A_i^T)) - n(phi(A_i^S))||_2^2``.

    Stacks are brought to the configured state first (pool, optional teacher
    binarization, normalization unless the rule resolved to ``never``); stacks
    that already went through the pipeline pass straight through.  With an
    active category subset the sum runs over the selected categories with
    coefficient ``1/|subset|`` and ``teacher_logits`` is required.
    """
    t = cfg.transform
    order = cfg.norm_order
    if teacher.num_categories != student.num_categories:
        raise IncompatibleStacksError(f"teacher has {teacher.num_categories} categories, student {student.num_categories}")
    teacher = prepare_cams(teacher, t.pool, t.binarize, order, t.epsilon)
    student = prepare_cams(student, t.pool, False, order, t.epsilon)
    _check_pair(teacher, student)

    per_cat = (teacher.data - student.data).pow(2).sum(dim=(-2, -1))
    if t.subset is None:
        per_sample = per_cat.mean(dim=-1)
    else:
        if teacher_logits is None:
            raise ConfigError("a category subset needs the teacher logits")
        mask = subset_mask(teacher_logits, t.subset).to(per_cat.device)
        per_sample = (per_cat * mask).sum(dim=-1) / mask.sum(dim=-1)
    return per_sample.mean() if per_sample.dim() else per_sample


def catkd_loss(student_logits, labels, teacher: CamStack, student: CamStack, cfg: DistillConfig,
               teacher_logits=None, return_parts=False):
    """``CE + beta * CAT``."""
    ce = ce_loss(student_logits, labels)
    cat = cat_loss(teacher, student, cfg, teacher_logits)
    total = ce + cfg.beta * cat
    if return_parts:
        return total, ce, cat
    return total
