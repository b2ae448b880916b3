"""Model assembly: the embedded-ready eWaSR net, its WaSR-style baselines, and ablations.

Variants
--------
ewasr       encoder taps -> (optional channel reduction) -> multi-scale concat ->
            LSSE metaformer stack -> semantic injection at strides 16 and 8
            (stride-8 local path refined by two SRM blocks) -> IMU-conditioned head.
wasr_light  ResNet-18-style taps feeding the WaSR decoder below.
wasr_ref    ResNet-101-style dilated taps feeding the same decoder at reference
            widths; built untrained for cost analysis.

WaSR decoder wiring (widths pinned by the reference decoder's per-block
parameter/FLOP profile; the mid taps are unused by the reference graph):
    arm1 = cARM1(cat[deep, imu])            # channel gate, IMU channel included
    a1   = ASPP1(deep)                       # dilated 3x3 pyramid, thin output
    f    = FFM([arm1, a1])                   # fuse + residual channel re-weighting
    c2   = cARM2(cat[f, imu])                # 1x1 projection + channel gate
    a2   = ASPP(up2(c2))                     # second pyramid, one scale up
    d    = FFM1([up2(f), local tap, imu])    # fuse with shallow encoder features
    out  = head(cat[d, up2(c2), a2], imu)
"""

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ChannelReduction, TapEncoder, multi_scale_concat
from .blocks import (ASPP, CARM, FFM, SIM, ConvNormAct, MetaFormerBlock,
                     SegHead, resize_mask_nearest)
from .errors import ConfigError

VARIANTS = ("ewasr", "wasr_light", "wasr_ref")
REPLACEABLE_BLOCKS = ("aspp1", "carm1", "ffm", "carm2", "aspp", "ffm1")

# Decoder widths per backbone preset: ASPP1 out, FFM out, cARM2 out, ASPP out,
# FFM1 out, head hidden.  The resnet101_dilated row reproduces the reference
# per-block cost table; the others scale the same proportions down.
WASR_DECODER_WIDTHS = {
    "resnet101_dilated": dict(aspp1_out=32, ffm_out=1024, carm2_out=512, aspp_out=8,
                              ffm1_out=1024, head_hidden=128),
    "resnet18": dict(aspp1_out=32, ffm_out=512, carm2_out=256, aspp_out=8,
                     ffm1_out=512, head_hidden=128),
    "tiny": dict(aspp1_out=8, ffm_out=64, carm2_out=32, aspp_out=4,
                 ffm1_out=64, head_hidden=32),
}


@dataclass
class ModelConfig:
    variant: str = "ewasr"
    backbone: str = "resnet18"
    input_size: tuple = (384, 512)
    num_classes: int = 3
    lsse_layout: tuple = ("crm", "srm", "srm")
    long_skip_srm: bool = True
    channel_reduction: bool = False
    decoder_channels: int = 128
    hidden_ratio: float = 2.0
    spatial_kernel: int = 7
    dilation_rates: tuple = (6, 12, 18)
    block_replacements: dict = field(default_factory=dict)
    backbone_weights: str = None

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.lsse_layout = tuple(self.lsse_layout)
        self.dilation_rates = tuple(self.dilation_rates)
        self.block_replacements = dict(self.block_replacements)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if not self.lsse_layout:
            raise ConfigError("lsse_layout must name at least one mixer block")
        for m in self.lsse_layout:
            if m not in ("crm", "srm"):
                raise ConfigError(f"lsse_layout entries must be 'crm' or 'srm', got {m!r}")
        for name, mode in self.block_replacements.items():
            if self.variant == "ewasr":
                raise ConfigError("block_replacements only apply to wasr variants")
            if name not in REPLACEABLE_BLOCKS:
                raise ConfigError(f"unknown replaceable block {name!r}; "
                                  f"choose from {REPLACEABLE_BLOCKS}")
            if mode not in ("keep", "conv1x1"):
                raise ConfigError(f"replacement mode must be 'keep' or 'conv1x1', got {mode!r}")
        if any(s % 32 for s in self.input_size):
            raise ConfigError(f"input_size {self.input_size} must be divisible by 32")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["input_size"] = list(self.input_size)
        d["lsse_layout"] = list(self.lsse_layout)
        d["dilation_rates"] = list(self.dilation_rates)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class PooledBroadcastConv(nn.Module):
    """conv1x1 on the pooled channel descriptor, broadcast over the spatial grid.

    Stand-in for a pure channel-gate block in the replacement ablation: its
    convolution runs where the gate's did (the 1x1 pooled vector), so the
    swap strictly removes cost.
    """

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        g = self.conv(F.adaptive_avg_pool2d(x, 1))
        return g.expand(-1, -1, x.shape[-2], x.shape[-1])


class Conv1x1Replacement(nn.Module):
    """Plain spatial 1x1 convolution standing in for a fusion/pyramid block."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, inputs):
        if not isinstance(inputs, torch.Tensor):
            inputs = torch.cat(list(inputs), dim=1)
        return self.conv(inputs)


class ProjectedCARM(nn.Module):
    """1x1 projection block followed by channel gating on the projected map."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.proj = ConvNormAct(in_channels, out_channels, 1)
        self.carm = CARM(out_channels)

    def forward(self, x):
        return self.carm(self.proj(x))


class WaSRNet(nn.Module):
    """WaSR-style encoder + fusion decoder (reference and light variants)."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.encoder = TapEncoder(config.backbone)
        c1, c2, c3, c4 = self.encoder.tap_channels
        strides = self.encoder.tap_strides
        if config.backbone not in WASR_DECODER_WIDTHS:
            raise ConfigError(f"no decoder widths defined for backbone {config.backbone!r}")
        w = WASR_DECODER_WIDTHS[config.backbone]
        rates = config.dilation_rates
        repl = config.block_replacements

        self.deep_stride = strides[3]
        self.local_stride = self.deep_stride // 2
        try:
            local_idx = strides.index(self.local_stride)
        except ValueError:
            raise ConfigError(f"no tap at stride {self.local_stride} for FFM1") from None
        self.local_idx = local_idx
        local_ch = self.encoder.tap_channels[local_idx]

        def pick(name, original, replacement):
            return replacement() if repl.get(name) == "conv1x1" else original()

        ffm_in = (c4 + 1) + w["aspp1_out"]
        ffm1_in = w["ffm_out"] + local_ch + 1
        self.carm1 = pick("carm1", lambda: CARM(c4 + 1, imu_channel=c4),
                          lambda: PooledBroadcastConv(c4 + 1))
        self.aspp1 = pick("aspp1", lambda: ASPP(c4, w["aspp1_out"], rates),
                          lambda: Conv1x1Replacement(c4, w["aspp1_out"]))
        self.ffm = pick("ffm", lambda: FFM(ffm_in, w["ffm_out"], gate_hidden=w["ffm_out"]),
                        lambda: Conv1x1Replacement(ffm_in, w["ffm_out"]))
        self.carm2 = pick("carm2", lambda: ProjectedCARM(w["ffm_out"] + 1, w["carm2_out"]),
                          lambda: Conv1x1Replacement(w["ffm_out"] + 1, w["carm2_out"]))
        self.aspp = pick("aspp", lambda: ASPP(w["carm2_out"], w["aspp_out"], rates),
                         lambda: Conv1x1Replacement(w["carm2_out"], w["aspp_out"]))
        self.ffm1 = pick("ffm1", lambda: FFM(ffm1_in, w["ffm1_out"], gate_hidden=w["ffm1_out"]),
                         lambda: Conv1x1Replacement(ffm1_in, w["ffm1_out"]))
        self.head = SegHead(w["ffm1_out"] + w["carm2_out"] + w["aspp_out"],
                            config.num_classes, hidden=w["head_hidden"])

    def named_blocks(self):
        return OrderedDict(encoder=self.encoder, aspp1=self.aspp1, carm1=self.carm1,
                           ffm=self.ffm, carm2=self.carm2, aspp=self.aspp,
                           ffm1=self.ffm1, head=self.head)

    def forward(self, image, imu):
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if imu.dim() == 2:
            imu = imu.unsqueeze(0)
        if imu.dim() == 3:
            imu = imu.unsqueeze(1)
        taps = self.encoder(image)
        deep = taps.features[3]
        imu_deep = resize_mask_nearest(imu.to(deep.dtype), deep.shape[-2:])

        arm1 = self.carm1(torch.cat([deep, imu_deep], dim=1))
        a1 = self.aspp1(deep)
        f = self.ffm([arm1, a1])

        c2 = self.carm2(torch.cat([f, imu_deep], dim=1))
        c2_up = F.interpolate(c2, scale_factor=2, mode="bilinear", align_corners=False)
        a2 = self.aspp(c2_up)

        f_up = F.interpolate(f, scale_factor=2, mode="bilinear", align_corners=False)
        local = taps.features[self.local_idx]
        imu_local = resize_mask_nearest(imu.to(deep.dtype), f_up.shape[-2:])
        d = self.ffm1([f_up, local, imu_local])

        probs = self.head(torch.cat([d, c2_up, a2], dim=1), imu, image.shape[-2:])
        return probs, taps.features[2]


class EWaSRNet(nn.Module):
    """Encoder taps -> LSSE semantic mixer -> semantic-injection decoder -> head."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.encoder = TapEncoder(config.backbone)
        chans = self.encoder.tap_channels
        if config.channel_reduction:
            self.reduction = ChannelReduction(chans)
            chans = self.reduction.out_channels
        else:
            self.reduction = None
        self.lsse_in_channels = sum(chans)

        mixer_of = {"crm": "carm", "srm": "sarm"}
        self.lsse = nn.Sequential(*[
            MetaFormerBlock(self.lsse_in_channels, mixer_of[entry],
                            hidden_ratio=config.hidden_ratio,
                            spatial_kernel=config.spatial_kernel)
            for entry in config.lsse_layout])

        if config.long_skip_srm:
            self.skip_refine = nn.Sequential(
                MetaFormerBlock(chans[1], "sarm", hidden_ratio=config.hidden_ratio,
                                spatial_kernel=config.spatial_kernel),
                MetaFormerBlock(chans[1], "sarm", hidden_ratio=config.hidden_ratio,
                                spatial_kernel=config.spatial_kernel))
        else:
            self.skip_refine = None

        self.inject_16 = SIM(chans[2], self.lsse_in_channels, config.decoder_channels)
        self.inject_8 = SIM(chans[1], config.decoder_channels, config.decoder_channels)
        self.head = SegHead(config.decoder_channels, config.num_classes)

    def named_blocks(self):
        blocks = OrderedDict(encoder=self.encoder)
        if self.reduction is not None:
            blocks["reduction"] = self.reduction
        blocks["lsse"] = self.lsse
        if self.skip_refine is not None:
            blocks["skip_refine"] = self.skip_refine
        blocks["inject_16"] = self.inject_16
        blocks["inject_8"] = self.inject_8
        blocks["head"] = self.head
        return blocks

    def forward(self, image, imu):
        if image.dim() == 3:
            image = image.unsqueeze(0)
        if imu.dim() == 2:
            imu = imu.unsqueeze(0)
        if imu.dim() == 3:
            imu = imu.unsqueeze(1)
        taps = self.encoder(image)
        sep_features = taps.features[2]
        if self.reduction is not None:
            taps = self.reduction(taps)
        semantic = self.lsse(multi_scale_concat(taps))
        d16 = self.inject_16(taps.features[2], semantic)
        local8 = taps.features[1]
        if self.skip_refine is not None:
            local8 = self.skip_refine(local8)
        d8 = self.inject_8(local8, d16)
        probs = self.head(d8, imu, image.shape[-2:])
        return probs, sep_features


def build(config):
    """Instantiate the model variant described by ``config``."""
    if config.variant == "ewasr":
        model = EWaSRNet(config)
    else:
        model = WaSRNet(config)
    if config.backbone_weights:
        from .checkpoint import load_into
        load_into(model.encoder, config.backbone_weights)
    return model


def summary(model):
    """Structured text summary: one line per named block (name, parameter count)."""
    lines = [f"variant: {model.config.variant}  backbone: {model.config.backbone}",
             f"tap channels: {list(model.encoder.tap_channels)}  "
             f"tap strides: {list(model.encoder.tap_strides)}",
             f"{'block':<12} {'params':>12}"]
    for name, module in model.named_blocks().items():
        n_params = sum(p.numel() for p in module.parameters())
        lines.append(f"{name:<12} {n_params:>12,}")
    total = sum(p.numel() for p in model.parameters())
    lines.append(f"{'total':<12} {total:>12,}")
    return "\n".join(lines)
