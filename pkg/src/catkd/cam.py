"""Class activation maps and the 1x1-convolution head conversion.

``CAM_i(x, y) = sum_j w[i, j] * f_j(x, y)``.  Averaging a CAM over space gives
the (bias-free) logit of its category, so a head that applies the classifier
weights as a 1x1 convolution *before* global pooling predicts exactly what the
dense head predicts while exposing the CAMs as a forward-pass byproduct.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ProvenanceError
from .heads import HeadParams, check_channels, gap

NORM_STATES = ("none", "l1", "l2")
CAM_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CamStack:
    """Per-category activation maps (``N x K x h x w`` or ``K x h x w``) with provenance.

    Transforms never mutate a stack; they return a new one with updated flags.
    """

    data: torch.Tensor
    producer: str = "unknown"
    pooled: Optional[tuple] = None
    normalized: str = "none"
    binarized: bool = False

    def __post_init__(self):
        if self.data.dim() not in (3, 4):
            raise ProvenanceError(f"CAM data must be K x h x w or N x K x h x w, got {tuple(self.data.shape)}")
        if self.normalized not in NORM_STATES:
            raise ProvenanceError(f"unknown normalization state {self.normalized!r}")

    @property
    def num_categories(self) -> int:
        return self.data.shape[-3]

    @property
    def spatial(self) -> tuple:
        return tuple(self.data.shape[-2:])

    @property
    def is_raw(self) -> bool:
        return self.pooled is None and self.normalized == "none" and not self.binarized

    def evolve(self, data, **flags) -> "CamStack":
        return replace(self, data=data, **flags)

    def detach(self) -> "CamStack":
        return replace(self, data=self.data.detach())

    def metadata(self) -> dict:
        return {
            "schema_version": CAM_SCHEMA_VERSION,
            "producer": self.producer,
            "pooled": None if self.pooled is None else list(self.pooled),
            "normalized": self.normalized,
            "binarized": self.binarized,
            "shape": list(self.data.shape),
        }


def compute_cams(features: torch.Tensor, head: HeadParams, producer: str = "unknown") -> CamStack:
    """CAMs of every category; the bias is left out (it is added at the logit stage)."""
    check_channels(features, head)
    data = torch.einsum("kc,...chw->...khw", head.weights.to(features.dtype), features)
    return CamStack(data, producer=producer)


def logits_from_cams(cams: CamStack, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if not cams.is_raw:
        raise ProvenanceError("logits are only defined for raw CAMs (not pooled, normalized or binarized)")
    out = gap(cams.data)
    if bias is not None:
        out = out + bias
    return out


class ConvHead(nn.Module):
    """Classifier applied as a bias-free 1x1 convolution, with the bias added after pooling."""

    def __init__(self, channels: int, num_categories: int, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(channels, num_categories, kernel_size=1, bias=False)
        self.bias = nn.Parameter(torch.zeros(num_categories)) if bias else None

    def cams(self, features: torch.Tensor) -> torch.Tensor:
        return self.conv(features)

    def forward(self, features: torch.Tensor):
        """Return ``(logits, cams)``."""
        cams = self.conv(features)
        logits = cams.mean(dim=(-2, -1))
        if self.bias is not None:
            logits = logits + self.bias
        return logits, cams

    def params(self) -> HeadParams:
        bias = None if self.bias is None else self.bias.detach().clone()
        return HeadParams(self.conv.weight.detach()[:, :, 0, 0].clone(), bias)


def convert_head(head: HeadParams) -> ConvHead:
    """1x1-convolution form of ``head``; parameter values are copied unchanged."""
    conv = ConvHead(head.channels, head.num_categories, bias=head.bias is not None)
    conv = conv.to(head.weights.dtype)
    with torch.no_grad():
        conv.conv.weight.copy_(head.weights[:, :, None, None])
        if head.bias is not None:
            conv.bias.copy_(head.bias)
    return conv


def logits_converted(features: torch.Tensor, head: HeadParams) -> torch.Tensor:
    """Logits via the converted path: 1x1 convolution, then global pooling."""
    check_channels(features, head)
    squeeze = features.dim() == 3
    x = features.unsqueeze(0) if squeeze else features
    cams = F.conv2d(x, head.weights.to(x.dtype)[:, :, None, None])
    out = cams.mean(dim=(-2, -1))
    if head.bias is not None:
        out = out + head.bias
    return out[0] if squeeze else out


def save_cams(cams: CamStack, path) -> Path:
    """Write ``<path>.npz`` plus a ``<path>.json`` metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    stem = path.with_suffix("")
    tmp = stem.with_name(stem.name + ".tmp.npz")
    np.savez(tmp, cams=cams.data.detach().cpu().numpy())
    os.replace(tmp, stem.with_suffix(".npz"))
    meta = stem.with_suffix(".json")
    tmp_meta = meta.with_name(meta.name + ".tmp")
    tmp_meta.write_text(json.dumps(cams.metadata(), indent=2))
    os.replace(tmp_meta, meta)
    return stem.with_suffix(".npz")


def load_cams(path) -> CamStack:
    stem = Path(path).with_suffix("")
    meta = json.loads(stem.with_suffix(".json").read_text())
    with np.load(stem.with_suffix(".npz")) as f:
        data = torch.from_numpy(f["cams"])
    pooled = meta["pooled"]
    return CamStack(
        data,
        producer=meta["producer"],
        pooled=None if pooled is None else tuple(pooled),
        normalized=meta["normalized"],
        binarized=meta["binarized"],
    )
