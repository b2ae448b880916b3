"""Attention, fusion, and metaformer building blocks shared by all model variants.

Every block is a pure function of (input, parameters): shapes are preserved
unless a block explicitly resizes, and all gates are sigmoid-bounded in (0, 1).
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

NORM_EPS = 1e-5


class ConvNormAct(nn.Module):
    """Conv (bias-free) + batch norm + optional ReLU."""

    def __init__(self, in_channels, out_channels, kernel_size=1, dilation=1, relu=True,
                 norm_eps=NORM_EPS):
        super().__init__()
        padding = dilation * (kernel_size - 1) // 2
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=padding,
                              dilation=dilation, bias=False)
        self.norm = nn.BatchNorm2d(out_channels, eps=norm_eps)
        self.act = nn.ReLU(inplace=True) if relu else nn.Identity()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class CARM(nn.Module):
    """Channel attention refinement: rescales channels by globally pooled content.

    gate = sigmoid(conv1x1(avgpool(x))), output = x * gate.

    ``imu_channel`` optionally marks the index of a binary horizon-mask channel
    in the input so analysis code can read the weight the gate assigns to it.
    Setting ``record_gates`` keeps the latest gate vector on the module.
    """

    def __init__(self, channels, imu_channel=None):
        super().__init__()
        self.channels = channels
        self.gate = nn.Conv2d(channels, channels, 1)
        self.imu_channel = imu_channel
        self.record_gates = False
        self.latest_gate = None

    def gate_values(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(
                f"CARM configured for {self.channels} channels, got {x.shape[1]}")
        return torch.sigmoid(self.gate(F.adaptive_avg_pool2d(x, 1)))

    def forward(self, x):
        g = self.gate_values(x)
        if self.record_gates:
            self.latest_gate = g.detach()
        return x * g


class SARM(nn.Module):
    """Spatial attention: per-pixel gate from stacked channel mean/max maps.

    The gating convolution sees two channels only, so the block stays cheap at
    any width.
    """

    def __init__(self, kernel_size=7):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ConfigError(f"spatial kernel must be odd, got {kernel_size}")
        # replicate padding keeps the gate spatially constant on constant inputs
        self.gate = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2,
                              padding_mode="replicate")

    def gate_values(self, x):
        mean_map = x.mean(dim=1, keepdim=True)
        max_map = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.gate(torch.cat([mean_map, max_map], dim=1)))

    def forward(self, x):
        return x * self.gate_values(x)


class FFM(nn.Module):
    """Feature fusion: concat branches, 3x3 conv block, residual channel re-weighting.

    out = f + f * sigmoid(conv1x1(relu(conv1x1(avgpool(f))))) with f the fused map.
    """

    def __init__(self, in_channels, out_channels, gate_hidden=None):
        super().__init__()
        gate_hidden = gate_hidden or out_channels
        self.in_channels = in_channels
        self.fuse = ConvNormAct(in_channels, out_channels, 3)
        self.gate1 = nn.Conv2d(out_channels, gate_hidden, 1)
        self.gate2 = nn.Conv2d(gate_hidden, out_channels, 1)
        self.record_gates = False
        self.latest_gate = None

    def forward(self, inputs):
        if isinstance(inputs, torch.Tensor):
            inputs = [inputs]
        sizes = {tuple(t.shape[-2:]) for t in inputs}
        if len(sizes) != 1:
            raise ShapeError(f"FFM inputs disagree on spatial size: {sorted(sizes)}")
        x = torch.cat(list(inputs), dim=1)
        if x.shape[1] != self.in_channels:
            raise ConfigError(
                f"FFM configured for {self.in_channels} input channels, got {x.shape[1]}")
        f = self.fuse(x)
        g = torch.sigmoid(self.gate2(F.relu(self.gate1(F.adaptive_avg_pool2d(f, 1)))))
        if self.record_gates:
            self.latest_gate = g.detach()
        return f + f * g


class ASPP(nn.Module):
    """Parallel 3x3 convolutions with distinct dilation rates, summed."""

    def __init__(self, in_channels, out_channels, rates=(6, 12, 18)):
        super().__init__()
        rates = tuple(rates)
        if len(set(rates)) != len(rates) or any(r < 1 for r in rates):
            raise ConfigError(f"dilation rates must be distinct and >= 1, got {rates}")
        self.branches = nn.ModuleList(
            nn.Conv2d(in_channels, out_channels, 3, padding=r, dilation=r) for r in rates)

    def forward(self, x):
        out = self.branches[0](x)
        for branch in self.branches[1:]:
            out = out + branch(x)
        return out


class MetaFormerBlock(nn.Module):
    """Pre-norm residual block: token mixer then pointwise MLP (ReLU, batch norm).

    y1 = x + proj(mixer(norm(x))); y = y1 + mlp(norm(y1)).  The mixer branch
    ends in a 1x1 projection, so zeroing that projection and the second MLP
    conv turns the block into an exact identity.  mixer='carm' gives the
    channel refinement module, mixer='sarm' the spatial refinement module.
    """

    def __init__(self, channels, mixer, hidden_ratio=2.0, spatial_kernel=7,
                 norm_eps=NORM_EPS):
        super().__init__()
        if mixer == "carm":
            self.mixer = CARM(channels)
        elif mixer == "sarm":
            self.mixer = SARM(spatial_kernel)
        else:
            raise ConfigError(f"unknown mixer {mixer!r}, expected 'carm' or 'sarm'")
        self.norm1 = nn.BatchNorm2d(channels, eps=norm_eps)
        self.mixer_proj = nn.Conv2d(channels, channels, 1)
        self.norm2 = nn.BatchNorm2d(channels, eps=norm_eps)
        hidden = int(round(channels * hidden_ratio))
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )

    def forward(self, x):
        x = x + self.mixer_proj(self.mixer(self.norm1(x)))
        x = x + self.mlp(self.norm2(x))
        return x


def crm(channels, hidden_ratio=2.0, norm_eps=NORM_EPS):
    """Channel refinement module: metaformer block with a CARM token mixer."""
    return MetaFormerBlock(channels, "carm", hidden_ratio=hidden_ratio, norm_eps=norm_eps)


def srm(channels, hidden_ratio=2.0, spatial_kernel=7, norm_eps=NORM_EPS):
    """Spatial refinement module: metaformer block with a SARM token mixer."""
    return MetaFormerBlock(channels, "sarm", hidden_ratio=hidden_ratio,
                           spatial_kernel=spatial_kernel, norm_eps=norm_eps)


class SIM(nn.Module):
    """Semantic injection: gate local features by semantics, add a semantic projection.

    The semantic map is bilinearly upsampled to the local grid first:
    out = proj_local(local) * sigmoid(gate(semantic)) + proj_sem(semantic).
    """

    def __init__(self, local_channels, semantic_channels, out_channels,
                 norm_eps=NORM_EPS):
        super().__init__()
        self.local_proj = ConvNormAct(local_channels, out_channels, relu=False,
                                      norm_eps=norm_eps)
        self.gate = ConvNormAct(semantic_channels, out_channels, relu=False,
                                norm_eps=norm_eps)
        self.semantic_proj = ConvNormAct(semantic_channels, out_channels, relu=False,
                                         norm_eps=norm_eps)

    def forward(self, local, semantic):
        if semantic.shape[-2:] != local.shape[-2:]:
            semantic = F.interpolate(semantic, size=local.shape[-2:], mode="bilinear",
                                     align_corners=False)
        return (self.local_proj(local) * torch.sigmoid(self.gate(semantic))
                + self.semantic_proj(semantic))


def resize_mask_nearest(mask, size):
    """Nearest-neighbour resize of a [B,1,H,W] mask; preserves binarity."""
    if mask.shape[-2:] == tuple(size):
        return mask
    return F.interpolate(mask, size=size, mode="nearest")


class SegHead(nn.Module):
    """IMU-conditioned prediction head.

    Concatenates the binary horizon mask (nearest-resized to the feature grid),
    applies a 1x1 conv block and a 1x1 classifier, softmaxes over the classes,
    and bilinearly upsamples the probabilities to the requested output size.
    """

    def __init__(self, in_channels, num_classes=3, hidden=None, norm_eps=NORM_EPS):
        super().__init__()
        hidden = hidden or in_channels
        self.block = ConvNormAct(in_channels + 1, hidden, norm_eps=norm_eps)
        self.classify = nn.Conv2d(hidden, num_classes, 1)

    def forward(self, x, imu, out_size=None):
        if imu.dim() == 3:
            imu = imu.unsqueeze(1)
        if not imu.is_meta and not torch.all((imu == 0) | (imu == 1)):
            raise ConfigError("IMU mask must be binary (0/1)")
        imu = resize_mask_nearest(imu.to(x.dtype), x.shape[-2:])
        logits = self.classify(self.block(torch.cat([x, imu], dim=1)))
        probs = torch.softmax(logits, dim=1)
        if out_size is not None and tuple(out_size) != tuple(probs.shape[-2:]):
            probs = F.interpolate(probs, size=tuple(out_size), mode="bilinear",
                                  align_corners=False)
        return probs
