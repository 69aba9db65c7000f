"""Classification heads and the pooled (dense) logit path."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import HeadShapeError


@dataclass
class HeadParams:
    """Classifier weights ``K x C`` plus an optional per-category bias.

    The same values serve the dense head (pool, then linear) and the
    converted 1x1-convolution head.
    """

    weights: torch.Tensor
    bias: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.weights.dim() != 2:
            raise HeadShapeError(f"head weights must be K x C, got shape {tuple(self.weights.shape)}")
        if not torch.isfinite(self.weights).all():
            raise HeadShapeError("head weights must be finite")
        if self.bias is not None and tuple(self.bias.shape) != (self.num_categories,):
            raise HeadShapeError(f"bias must have length {self.num_categories}, got {tuple(self.bias.shape)}")

    @property
    def num_categories(self) -> int:
        return self.weights.shape[0]

    @property
    def channels(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def from_linear(cls, layer: torch.nn.Linear) -> "HeadParams":
        bias = None if layer.bias is None else layer.bias.detach().clone()
        return cls(layer.weight.detach().clone(), bias)

    def to(self, dtype) -> "HeadParams":
        return HeadParams(self.weights.to(dtype), None if self.bias is None else self.bias.to(dtype))


def gap(features: torch.Tensor) -> torch.Tensor:
    """Global average pooling over the two trailing (spatial) axes."""
    if features.dim() < 3 or features.shape[-1] == 0 or features.shape[-2] == 0:
        raise HeadShapeError(f"expected (..., C, H, W) features, got shape {tuple(features.shape)}")
    return features.mean(dim=(-2, -1))


def check_channels(features: torch.Tensor, head: HeadParams):
    if features.dim() < 3 or features.shape[-3] != head.channels:
        raise HeadShapeError(
            f"head expects {head.channels} channels, features have shape {tuple(features.shape)}"
        )


def logits_dense(features: torch.Tensor, head: HeadParams) -> torch.Tensor:
    """Logits of the conventional head: pool every channel, then apply the linear layer."""
    check_channels(features, head)
    out = gap(features) @ head.weights.T
    if head.bias is not None:
        out = out + head.bias
    return out
