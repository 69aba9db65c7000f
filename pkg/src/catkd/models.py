"""Backbone + head classifiers that can switch to the converted (CAM-producing) head."""

from __future__ import annotations

import copy

import torch
import torch.nn as nn

from .backbones import BackboneSpec, build_backbone, check_input
from .cam import CamStack, ConvHead, convert_head
from .heads import HeadParams, gap


class CamClassifier(nn.Module):
    """A classifier whose head is either dense (pool then linear) or a 1x1 convolution.

    ``convert()`` swaps the dense head for the convolutional one without
    touching parameter values; after conversion ``forward_cams`` returns the
    logits together with the CAMs that produced them.
    """

    def __init__(self, spec: BackboneSpec, num_classes: int, bias: bool = True):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.backbone = build_backbone(spec)
        self.head = nn.Linear(self.backbone.out_channels, num_classes, bias=bias)

    @property
    def converted(self) -> bool:
        return isinstance(self.head, ConvHead)

    @property
    def has_bias(self) -> bool:
        return self.head.bias is not None

    def convert(self) -> "CamClassifier":
        if not self.converted:
            p = next(self.head.parameters())
            self.head = convert_head(self.head_params()).to(device=p.device, dtype=p.dtype)
        return self

    def head_params(self) -> HeadParams:
        if self.converted:
            return self.head.params()
        return HeadParams.from_linear(self.head)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        check_input(self.spec, x)
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.features(x)
        if self.converted:
            return self.head(f)[0]
        return self.head(gap(f))

    def forward_cams(self, x: torch.Tensor, producer: str = "model"):
        """Return ``(logits, CamStack)``; requires the converted head."""
        if not self.converted:
            raise RuntimeError("call convert() before requesting CAMs")
        logits, cams = self.head(self.features(x))
        return logits, CamStack(cams, producer=producer)


def build_model(spec: BackboneSpec, num_classes: int, bias: bool = True, seed=None) -> CamClassifier:
    if seed is not None:
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            return CamClassifier(spec, num_classes, bias)
    return CamClassifier(spec, num_classes, bias)


def frozen_copy(model: CamClassifier) -> CamClassifier:
    """Eval-mode, gradient-free copy used as a CAM producer."""
    teacher = copy.deepcopy(model).eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    return teacher
