"""Baseline and DeepLabV3+ segmentation networks."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbones import BackboneSpec, get_backbone_spec, probe_backbone

OUTPUT_STRIDE = 16
VARIANTS = ("baseline", "deeplabv3plus")


class ShapeError(ValueError):
    """Input spatial size is incompatible with the network's stride contract."""


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "resnet101"
    variant: str = "deeplabv3plus"
    num_classes: int = 5
    aspp_rates: tuple[int, ...] = (12, 24, 36)
    aspp_channels: int = 256
    decoder_channels: int = 256
    low_level_projection: int = 48

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not self.aspp_rates or any(r <= 0 for r in self.aspp_rates):
            raise ValueError(f"ASPP rates must be positive, got {self.aspp_rates}")
        object.__setattr__(self, "aspp_rates", tuple(int(r) for r in self.aspp_rates))

    @property
    def backbone_spec(self) -> BackboneSpec:
        return get_backbone_spec(self.backbone)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["aspp_rates"] = list(self.aspp_rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "aspp_rates" in d:
            d["aspp_rates"] = tuple(d["aspp_rates"])
        return cls(**d)


def conv_bn_relu(cin, cout, kernel_size, dilation=1, bias=False):
    padding = dilation * (kernel_size - 1) // 2
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel_size, padding=padding, dilation=dilation, bias=bias),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


def check_divisible(x: torch.Tensor, multiple: int = OUTPUT_STRIDE) -> None:
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ShapeError(
            f"input size {h}x{w} is not divisible by {multiple}; pad with pad_to_multiple() or predict_padded()"
        )


class ASPP(nn.Module):
    """1x1 branch, one 3x3 atrous branch per rate, image pooling; fused by a 1x1 projection."""

    def __init__(self, in_channels: int, channels: int = 256, rates=(12, 24, 36)):
        super().__init__()
        branches = [conv_bn_relu(in_channels, channels, 1)]
        branches += [conv_bn_relu(in_channels, channels, 3, dilation=r) for r in rates]
        self.branches = nn.ModuleList(branches)
        # no BN on the pooled branch: a 1x1 map with batch 1 has no batch statistics
        self.pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1), nn.Conv2d(in_channels, channels, 1), nn.ReLU(inplace=True)
        )
        self.project = conv_bn_relu(channels * (len(rates) + 2), channels, 1)

    def branch_outputs(self, x):
        outs = [b(x) for b in self.branches]
        pooled = self.pool(x)
        outs.append(F.interpolate(pooled, size=x.shape[-2:], mode="bilinear", align_corners=False))
        return outs

    def forward(self, x):
        return self.project(torch.cat(self.branch_outputs(x), dim=1))


class Decoder(nn.Module):
    def __init__(self, low_channels: int, fused_channels: int, num_classes: int, channels=256, projection=48):
        super().__init__()
        self.low_project = conv_bn_relu(low_channels, projection, 1)
        self.refine = nn.Sequential(
            conv_bn_relu(fused_channels + projection, channels, 3),
            conv_bn_relu(channels, channels, 3),
        )
        self.classifier = nn.Conv2d(channels, num_classes, 1)

    def forward(self, fused, low, out_size=None):
        if low.shape[-1] != fused.shape[-1] * 4 or low.shape[-2] != fused.shape[-2] * 4:
            raise ShapeError(f"low-level features {tuple(low.shape[-2:])} are not 4x the fused {tuple(fused.shape[-2:])}")
        up = F.interpolate(fused, size=low.shape[-2:], mode="bilinear", align_corners=False)
        x = self.refine(torch.cat([up, self.low_project(low)], dim=1))
        logits = self.classifier(x)
        size = out_size or (low.shape[-2] * 4, low.shape[-1] * 4)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


class DeepLabV3Plus(nn.Module):
    def __init__(self, config: ModelConfig, backbone: nn.Module):
        super().__init__()
        spec = config.backbone_spec
        self.config = config
        self.backbone = backbone
        self.aspp = ASPP(spec.high_level_channels, config.aspp_channels, config.aspp_rates)
        self.decoder = Decoder(
            spec.low_level_channels, config.aspp_channels, config.num_classes,
            config.decoder_channels, config.low_level_projection,
        )

    def forward(self, x):
        check_divisible(x)
        low, high = self.backbone(x)
        return self.decoder(self.aspp(high), low, out_size=x.shape[-2:])


class Baseline(nn.Module):
    """Backbone followed by two 3x3 conv-BN-ReLU layers and a x16 bilinear upsample."""

    def __init__(self, config: ModelConfig, backbone: nn.Module):
        super().__init__()
        spec = config.backbone_spec
        c = config.decoder_channels
        self.config = config
        self.backbone = backbone
        self.decoder = nn.Sequential(
            nn.Conv2d(spec.high_level_channels, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1), nn.BatchNorm2d(c), nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(c, config.num_classes, 1)

    def forward(self, x):
        check_divisible(x)
        _, high = self.backbone(x)
        logits = self.classifier(self.decoder(high))
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


def build_model(config: ModelConfig, pretrained: bool = False, seed: int | None = None) -> nn.Module:
    """Instantiate and probe the configured network.

    With ``seed`` the initial weights are a pure function of it and the
    global torch RNG is left untouched.
    """
    spec = config.backbone_spec
    cls = Baseline if config.variant == "baseline" else DeepLabV3Plus
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        try:
            backbone = spec.builder(pretrained)
        except (OSError, RuntimeError) as exc:  # weights download offline
            raise RuntimeError(f"could not load pretrained {spec.name} weights: {exc}") from exc
        probe_backbone(spec, backbone)
        model = cls(config, backbone)
    return model


def count_parameters(model: nn.Module, trainable_only: bool = True) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)


def pad_to_multiple(x: torch.Tensor, multiple: int = OUTPUT_STRIDE) -> tuple[torch.Tensor, tuple[int, int]]:
    """Reflect-pad bottom/right to the next multiple; returns the padded tensor and original size."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


def predict_padded(model: nn.Module, x: torch.Tensor, multiple: int = OUTPUT_STRIDE) -> torch.Tensor:
    """Logits for inputs of any size: pad, run, crop back."""
    padded, (h, w) = pad_to_multiple(x, multiple)
    return model(padded)[..., :h, :w]
