"""Class attention transfer (CAT) and CAT-KD distillation toolkit."""

__version__ = "0.1.0"

from .backbones import ZOO, BackboneSpec, build_backbone, forward_features
from .cam import CamStack, ConvHead, compute_cams, convert_head, logits_converted, logits_from_cams
from .heads import HeadParams, gap, logits_dense
from .losses import DistillConfig, cat_loss, catkd_loss, ce_loss, kd_baseline_loss
from .models import CamClassifier, build_model
from .transforms import (
    SubsetPolicy,
    TransformConfig,
    binarize_cams,
    normalize_cams,
    pool_cams,
    select_categories,
)

__all__ = [
    "ZOO", "BackboneSpec", "build_backbone", "forward_features",
    "CamStack", "ConvHead", "compute_cams", "convert_head", "logits_converted", "logits_from_cams",
    "HeadParams", "gap", "logits_dense",
    "DistillConfig", "cat_loss", "catkd_loss", "ce_loss", "kd_baseline_loss",
    "CamClassifier", "build_model",
    "SubsetPolicy", "TransformConfig", "binarize_cams", "normalize_cams", "pool_cams", "select_categories",
]
