"""Backbone registry.

Every backbone returns ``(low_level, high_level)`` features at strides 4 and
16.  Stages whose native stride would exceed 16 are dilated instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn
import torchvision.models as tvm

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    low_level_channels: int
    high_level_channels: int
    builder: Callable[[bool], nn.Module]
    low_level_stride: int = 4
    high_level_stride: int = 16
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD


class ResNetFeatures(nn.Module):
    def __init__(self, pretrained: bool):
        super().__init__()
        weights = tvm.ResNet101_Weights.IMAGENET1K_V1 if pretrained else None
        net = tvm.resnet101(weights=weights, replace_stride_with_dilation=[False, False, True])
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2, self.layer3, self.layer4 = net.layer1, net.layer2, net.layer3, net.layer4

    def forward(self, x):
        low = self.layer1(self.stem(x))
        return low, self.layer4(self.layer3(self.layer2(low)))


class DenseNetFeatures(nn.Module):
    def __init__(self, pretrained: bool):
        super().__init__()
        weights = tvm.DenseNet201_Weights.IMAGENET1K_V1 if pretrained else None
        f = tvm.densenet201(weights=weights).features
        # keep denseblock4 at stride 16
        f.transition3.pool = nn.Identity()
        self.stem = nn.Sequential(f.conv0, f.norm0, f.relu0, f.pool0, f.denseblock1)
        self.rest = nn.Sequential(
            f.transition1, f.denseblock2, f.transition2, f.denseblock3, f.transition3, f.denseblock4, f.norm5,
            nn.ReLU(inplace=False),
        )

    def forward(self, x):
        low = self.stem(x)
        return low, self.rest(low)


def _dilate_depthwise(stage: nn.Sequential, dilation: int, first_stride_to_one: bool) -> None:
    for i, block in enumerate(stage):
        conv = block.block[1][0]  # MBConv depthwise conv
        if i == 0 and first_stride_to_one:
            conv.stride = (1, 1)
        k = conv.kernel_size[0]
        conv.dilation = (dilation, dilation)
        conv.padding = (dilation * (k - 1) // 2,) * 2


class EfficientNetFeatures(nn.Module):
    def __init__(self, pretrained: bool):
        super().__init__()
        weights = tvm.EfficientNet_B1_Weights.IMAGENET1K_V1 if pretrained else None
        f = tvm.efficientnet_b1(weights=weights).features
        _dilate_depthwise(f[6], 2, first_stride_to_one=True)
        _dilate_depthwise(f[7], 2, first_stride_to_one=False)
        self.stem = f[:3]
        self.rest = f[3:]

    def forward(self, x):
        low = self.stem(x)
        return low, self.rest(low)


def _conv_bn(cin, cout, stride):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)
    )


class TinyFeatures(nn.Module):
    """Four strided conv blocks; for tests, gradient checks and smoke runs."""

    def __init__(self, pretrained: bool = False):
        super().__init__()
        if pretrained:
            raise ValueError("the tiny backbone has no pretrained weights")
        self.low = nn.Sequential(_conv_bn(3, 16, 2), _conv_bn(16, 24, 2))
        self.high = nn.Sequential(_conv_bn(24, 32, 2), _conv_bn(32, 48, 2))

    def forward(self, x):
        low = self.low(x)
        return low, self.high(low)


REGISTRY: dict[str, BackboneSpec] = {
    "resnet101": BackboneSpec("resnet101", 256, 2048, ResNetFeatures),
    "densenet201": BackboneSpec("densenet201", 256, 1920, DenseNetFeatures),
    "efficientnet_b1": BackboneSpec("efficientnet_b1", 24, 1280, EfficientNetFeatures),
    "tiny": BackboneSpec("tiny", 24, 48, TinyFeatures),
}


def get_backbone_spec(name: str) -> BackboneSpec:
    try:
        return REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown backbone {name!r}; registered: {', '.join(sorted(REGISTRY))}") from None


def probe_backbone(spec: BackboneSpec, module: nn.Module, size: int = 64) -> None:
    """Check declared channels and strides with a forward pass on zeros."""
    was_training = module.training
    module.eval()
    try:
        p = next(module.parameters())
        with torch.no_grad():
            low, high = module(torch.zeros(1, 3, size, size, dtype=p.dtype, device=p.device))
    finally:
        module.train(was_training)
    expected = [
        ("low-level", low, spec.low_level_channels, spec.low_level_stride),
        ("high-level", high, spec.high_level_channels, spec.high_level_stride),
    ]
    for label, feat, channels, stride in expected:
        want = (channels, size // stride, size // stride)
        if tuple(feat.shape[1:]) != want:
            raise RuntimeError(
                f"{spec.name} {label} features have shape {tuple(feat.shape[1:])}, declared {want}"
            )
