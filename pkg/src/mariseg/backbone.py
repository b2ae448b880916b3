"""Residual encoders with multi-scale feature taps.

The encoder exposes the four residual-stage outputs (strides 4/8/16/32, or
4/8/8/8 when the deep stages are dilated) as taps for the decoders.  The
standard presets keep the classification head so parameter totals and
checkpoint layouts match the stock classification models;
``extract_features`` never runs it.
"""

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError


class TapSet(NamedTuple):
    """Multi-scale encoder features, shallowest first."""

    features: tuple           # tensors [B, C, H, W]
    strides: tuple            # downsampling factor of each tap

    @property
    def channels(self):
        return tuple(f.shape[1] for f in self.features)


BACKBONE_PRESETS = {
    # name: block type, blocks per stage, stage widths, dilate deep stages, keep fc
    "resnet18": dict(block="basic", layers=(2, 2, 2, 2), widths=(64, 128, 256, 512),
                     dilated=False, classifier=True),
    "resnet101_dilated": dict(block="bottleneck", layers=(3, 4, 23, 3),
                              widths=(64, 128, 256, 512), dilated=True, classifier=True),
    "tiny": dict(block="basic", layers=(1, 1, 1, 1), widths=(8, 16, 32, 64),
                 dilated=False, classifier=False),
}


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes, planes, stride=1, dilation=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=dilation, dilation=dilation,
                               bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = self.downsample(x) if self.downsample is not None else x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_planes, planes, stride=1, dilation=1, downsample=None):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=dilation,
                               dilation=dilation, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample

    def forward(self, x):
        identity = self.downsample(x) if self.downsample is not None else x
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


_BLOCKS = {"basic": BasicBlock, "bottleneck": Bottleneck}


class TapEncoder(nn.Module):
    """Residual encoder returning a TapSet of the four stage outputs."""

    def __init__(self, preset="resnet18"):
        super().__init__()
        if preset not in BACKBONE_PRESETS:
            raise ConfigError(f"unknown backbone preset {preset!r}; "
                              f"choose from {sorted(BACKBONE_PRESETS)}")
        self.preset = preset
        preset_cfg = BACKBONE_PRESETS[preset]
        block = _BLOCKS[preset_cfg["block"]]
        widths = preset_cfg["widths"]
        self.dilated = preset_cfg["dilated"]

        self.conv1 = nn.Conv2d(3, widths[0], 7, stride=2, padding=3, bias=False)
        self.bn1 = nn.BatchNorm2d(widths[0])
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)

        self.in_planes = widths[0]
        stage_cfg = [(widths[0], 1, 1), (widths[1], 2, 1)]
        if self.dilated:
            stage_cfg += [(widths[2], 1, 2), (widths[3], 1, 4)]
            self.tap_strides = (4, 8, 8, 8)
        else:
            stage_cfg += [(widths[2], 2, 1), (widths[3], 2, 1)]
            self.tap_strides = (4, 8, 16, 32)
        self.layer1 = self._make_stage(block, stage_cfg[0], preset_cfg["layers"][0])
        self.layer2 = self._make_stage(block, stage_cfg[1], preset_cfg["layers"][1])
        self.layer3 = self._make_stage(block, stage_cfg[2], preset_cfg["layers"][2])
        self.layer4 = self._make_stage(block, stage_cfg[3], preset_cfg["layers"][3])
        self.tap_channels = tuple(w * block.expansion for w in widths)

        if preset_cfg["classifier"]:
            self.avgpool = nn.AdaptiveAvgPool2d(1)
            self.fc = nn.Linear(widths[3] * block.expansion, 1000)
        else:
            self.avgpool = None
            self.fc = None

        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.constant_(m.weight, 1)
                nn.init.constant_(m.bias, 0)

    def _make_stage(self, block, cfg, depth):
        planes, stride, dilation = cfg
        downsample = None
        if stride != 1 or self.in_planes != planes * block.expansion:
            downsample = nn.Sequential(
                nn.Conv2d(self.in_planes, planes * block.expansion, 1, stride=stride,
                          bias=False),
                nn.BatchNorm2d(planes * block.expansion),
            )
        layers = [block(self.in_planes, planes, stride, dilation, downsample)]
        self.in_planes = planes * block.expansion
        layers += [block(self.in_planes, planes, 1, dilation) for _ in range(depth - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(f"input resolution {h}x{w} must be divisible by 32")
        x = self.maxpool(self.relu(self.bn1(self.conv1(x))))
        t1 = self.layer1(x)
        t2 = self.layer2(t1)
        t3 = self.layer3(t2)
        t4 = self.layer4(t3)
        return TapSet((t1, t2, t3, t4), self.tap_strides)


def extract_features(encoder, image):
    """Run the encoder on a [B,3,H,W] (or [3,H,W]) image and return its TapSet."""
    if image.dim() == 3:
        image = image.unsqueeze(0)
    return encoder(image)


def multi_scale_concat(taps):
    """Resize every tap to the deepest tap's grid and concatenate along channels.

    Downsampling uses average pooling by the integer stride ratio; a single tap
    passes through untouched.
    """
    target = max(taps.strides)
    resized = []
    for feat, stride in zip(taps.features, taps.strides):
        if target % stride != 0:
            raise ShapeError(f"tap stride {stride} does not divide target {target}")
        factor = target // stride
        resized.append(F.avg_pool2d(feat, factor) if factor > 1 else feat)
    if len(resized) == 1:
        return resized[0]
    return torch.cat(resized, dim=1)


class ChannelReduction(nn.Module):
    """Halve every tap's channel count with per-tap 1x1 projections."""

    def __init__(self, channels):
        super().__init__()
        self.out_channels = tuple(math.ceil(c / 2) for c in channels)
        self.projections = nn.ModuleList(
            nn.Conv2d(c, o, 1) for c, o in zip(channels, self.out_channels))

    def forward(self, taps):
        reduced = tuple(proj(f) for proj, f in zip(self.projections, taps.features))
        return TapSet(reduced, taps.strides)
