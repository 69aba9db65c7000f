"""Feature extractors that expose the final convolutional feature maps.

Every backbone maps an image batch ``N x 3 x H x W`` to a feature batch
``N x C x h x w`` where ``(h, w)`` is the resolution of the class activation
maps the network can produce.  The zoo covers CIFAR-style ResNets, a
ResNet8x4-style net, wide ResNets, VGG-style nets and a small ``tiny-cnn``
used for fast tests.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InputShapeError

FAMILIES = ("resnet-cifar", "resnet8x4-style", "wrn-style", "vgg-style", "tiny-cnn")


@dataclass(frozen=True)
class BackboneSpec:
    family: str = "tiny-cnn"
    depth: int = 3
    width: int = 16
    input_shape: tuple = (3, 32, 32)
    cam_resolution: tuple = (8, 8)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"backbone.family: unknown family {self.family!r}, expected one of {FAMILIES}")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "cam_resolution", tuple(int(v) for v in self.cam_resolution))
        if len(self.input_shape) != 3 or min(self.input_shape) <= 0:
            raise ConfigError(f"backbone.input_shape: expected (channels, height, width), got {self.input_shape}")
        if len(self.cam_resolution) != 2 or min(self.cam_resolution) <= 0:
            raise ConfigError(f"backbone.cam_resolution: expected (h, w), got {self.cam_resolution}")
        if self.depth <= 0 or self.width <= 0:
            raise ConfigError("backbone.depth and backbone.width must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["cam_resolution"] = list(self.cam_resolution)
        return d


# Preset specs with the conventional CIFAR names.
ZOO = {
    "resnet20": BackboneSpec("resnet-cifar", 20, 1),
    "resnet32": BackboneSpec("resnet-cifar", 32, 1),
    "resnet56": BackboneSpec("resnet-cifar", 56, 1),
    "resnet110": BackboneSpec("resnet-cifar", 110, 1),
    "resnet8x4": BackboneSpec("resnet8x4-style", 8, 4),
    "resnet32x4": BackboneSpec("resnet8x4-style", 32, 4),
    "wrn-16-2": BackboneSpec("wrn-style", 16, 2),
    "wrn-40-1": BackboneSpec("wrn-style", 40, 1),
    "wrn-40-2": BackboneSpec("wrn-style", 40, 2),
    "vgg8": BackboneSpec("vgg-style", 8, 1, cam_resolution=(4, 4)),
    "vgg13": BackboneSpec("vgg-style", 13, 1, cam_resolution=(4, 4)),
    "tiny-cnn": BackboneSpec("tiny-cnn", 3, 16),
}


class BasicBlock(nn.Module):
    def __init__(self, in_planes, planes, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class CifarResNet(nn.Module):
    """ResNet with three stages of basic blocks (depth = 6n + 2)."""

    def __init__(self, depth, filters, in_channels=3):
        super().__init__()
        if (depth - 2) % 6:
            raise ConfigError(f"backbone.depth: CIFAR ResNet depth must be 6n+2, got {depth}")
        n = (depth - 2) // 6
        self.conv1 = nn.Conv2d(in_channels, filters[0], 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(filters[0])
        layers = []
        in_planes = filters[0]
        for stage, planes in enumerate(filters[1:]):
            for i in range(n):
                stride = 2 if stage > 0 and i == 0 else 1
                layers.append(BasicBlock(in_planes, planes, stride))
                in_planes = planes
        self.layers = nn.Sequential(*layers)
        self.out_channels = in_planes

    def forward(self, x):
        return self.layers(F.relu(self.bn1(self.conv1(x))))


class WideBlock(nn.Module):
    def __init__(self, in_planes, planes, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv2(F.relu(self.bn2(self.conv1(o))))
        return y + (x if self.shortcut is None else self.shortcut(o))


class WideResNet(nn.Module):
    """Pre-activation WRN-depth-k (depth = 6n + 4)."""

    def __init__(self, depth, k, in_channels=3):
        super().__init__()
        if (depth - 4) % 6:
            raise ConfigError(f"backbone.depth: WRN depth must be 6n+4, got {depth}")
        n = (depth - 4) // 6
        widths = [16, 16 * k, 32 * k, 64 * k]
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False)
        blocks = []
        in_planes = widths[0]
        for stage, planes in enumerate(widths[1:]):
            for i in range(n):
                blocks.append(WideBlock(in_planes, planes, 2 if stage > 0 and i == 0 else 1))
                in_planes = planes
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(in_planes)
        self.out_channels = in_planes

    def forward(self, x):
        return F.relu(self.bn(self.blocks(self.conv1(x))))


_VGG_LAYOUT = {
    8: [1, 1, 1, 2],
    11: [1, 1, 2, 2, 2],
    13: [2, 2, 2, 2, 2],
}


class VGGNet(nn.Module):
    """VGG-style stack with batch norm; pooling stops at the declared resolution."""

    def __init__(self, depth, width, input_hw, cam_hw, in_channels=3):
        super().__init__()
        if depth not in _VGG_LAYOUT:
            raise ConfigError(f"backbone.depth: VGG depth must be one of {sorted(_VGG_LAYOUT)}, got {depth}")
        n_pool = _pool_count(input_hw, cam_hw)
        layers = []
        c_in = in_channels
        channels = [64, 128, 256, 512, 512]
        for stage, reps in enumerate(_VGG_LAYOUT[depth]):
            c_out = channels[stage] * width
            for _ in range(reps):
                layers += [nn.Conv2d(c_in, c_out, 3, 1, 1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU()]
                c_in = c_out
            if stage < n_pool:
                layers.append(nn.MaxPool2d(2))
        if n_pool > len(_VGG_LAYOUT[depth]):
            raise ConfigError("backbone.cam_resolution: too small for this VGG depth")
        self.body = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x):
        return self.body(x)


class TinyCNN(nn.Module):
    """2-4 conv-bn-relu blocks; max-pooling after the leading blocks."""

    def __init__(self, depth, width, input_hw, cam_hw, in_channels=3):
        super().__init__()
        if not 1 <= depth <= 4:
            raise ConfigError(f"backbone.depth: tiny-cnn supports 1-4 blocks, got {depth}")
        n_pool = _pool_count(input_hw, cam_hw)
        if n_pool > depth:
            raise ConfigError("backbone.cam_resolution: tiny-cnn needs one block per 2x downsampling")
        mult = [1, 2, 2, 4]
        layers = []
        c_in = in_channels
        for i in range(depth):
            c_out = width * mult[i]
            layers += [nn.Conv2d(c_in, c_out, 3, 1, 1, bias=False), nn.BatchNorm2d(c_out), nn.ReLU()]
            if i < n_pool:
                layers.append(nn.MaxPool2d(2))
            c_in = c_out
        self.body = nn.Sequential(*layers)
        self.out_channels = c_in

    def forward(self, x):
        return self.body(x)


def _pool_count(input_hw, cam_hw):
    ratios = {input_hw[0] / cam_hw[0], input_hw[1] / cam_hw[1]}
    if len(ratios) != 1:
        raise ConfigError("backbone.cam_resolution: must downsample both axes equally")
    ratio = ratios.pop()
    n = round(math.log2(ratio)) if ratio >= 1 else -1
    if n < 0 or 2**n != ratio:
        raise ConfigError(f"backbone.cam_resolution: input/CAM ratio must be a power of two, got {ratio}")
    return n


def build_backbone(spec: BackboneSpec) -> nn.Module:
    """Build the feature extractor and check its output resolution with a dry run."""
    c, h, w = spec.input_shape
    if spec.family == "resnet-cifar":
        net = CifarResNet(spec.depth, [16 * spec.width, 16 * spec.width, 32 * spec.width, 64 * spec.width], c)
    elif spec.family == "resnet8x4-style":
        base = 8 * spec.width
        net = CifarResNet(spec.depth, [base, 2 * base, 4 * base, 8 * base], c)
    elif spec.family == "wrn-style":
        net = WideResNet(spec.depth, spec.width, c)
    elif spec.family == "vgg-style":
        net = VGGNet(spec.depth, spec.width, (h, w), spec.cam_resolution, c)
    else:
        net = TinyCNN(spec.depth, spec.width, (h, w), spec.cam_resolution, c)
    net.spec = spec

    was_training = net.training
    net.eval()
    with torch.no_grad():
        out = net(torch.zeros(1, c, h, w))
    net.train(was_training)
    if tuple(out.shape[2:]) != spec.cam_resolution:
        raise ConfigError(
            f"backbone.cam_resolution: declared {spec.cam_resolution} but {spec.family} "
            f"produces {tuple(out.shape[2:])} for input {spec.input_shape}"
        )
    return net


def check_input(spec: BackboneSpec, batch: torch.Tensor):
    if batch.dim() != 4 or tuple(batch.shape[1:]) != spec.input_shape:
        raise InputShapeError(f"expected batch of shape (N, {', '.join(map(str, spec.input_shape))}), got {tuple(batch.shape)}")


def forward_features(model: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Final-convolution feature maps ``N x C x h x w`` for ``batch``."""
    backbone = getattr(model, "backbone", model)
    check_input(backbone.spec, batch)
    return backbone(batch)
