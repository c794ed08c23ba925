"""
CAC-UNet segmentation network.

A residual encoder (E1..E5) with optional IBN normalization and atrous
E4/E5 stages, a pyramid-pooling center, a decoder of instance-normalized
residual units gated by SCSE attention (D5..D1) and a hypercolumn head.

Encoder taps are returned fine to coarse (E1 at /2 ... E5 at /32, or /8 for
E4/E5 when atrous is on); decoder taps coarse to fine (D5 ... D1 at full
resolution), each decoder unit doubling the resolution of the previous one.
"""
from dataclasses import asdict, dataclass
from typing import Sequence
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import BadShape, InvalidConfig, ShapeMismatch

logger = logging.getLogger(__name__)

DICE_SMOOTH = 1.0
IBN_STAGE_CHOICES = (2, 3, 4, 5)


@dataclass(frozen=True)
class EncoderPreset:
    block: str
    stem_width: int
    widths: tuple
    blocks: tuple


PRESETS = {
    'tiny': EncoderPreset('basic', 8, (8, 16, 32, 64), (1, 1, 1, 1)),
    'small': EncoderPreset('basic', 16, (16, 32, 64, 128), (2, 2, 2, 2)),
    # 50-layer bottleneck topology
    'reference': EncoderPreset('bottleneck', 64, (64, 128, 256, 512), (3, 4, 6, 3)),
}


@dataclass(frozen=True)
class BackboneConfig:
    encoder_depth_preset: str = 'tiny'
    ibn_stages: tuple = (2, 3, 4)
    atrous: bool = True
    atrous_rates: tuple = (2, 4)
    ppm: bool = True
    ppm_scales: tuple = (1, 2, 3, 6)
    scse: bool = True
    hypercolumn: bool = True
    input_size: int = 512

    def __post_init__(self):
        if self.encoder_depth_preset not in PRESETS:
            raise InvalidConfig(f"unknown encoder preset {self.encoder_depth_preset!r}; choose from {sorted(PRESETS)}")
        if self.input_size < 32 or self.input_size % 32:
            raise InvalidConfig(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if not set(self.ibn_stages) <= set(IBN_STAGE_CHOICES):
            raise InvalidConfig(f"ibn_stages must be a subset of {IBN_STAGE_CHOICES}, got {self.ibn_stages}")
        scales = tuple(self.ppm_scales)
        if not scales or any(int(s) != s or s < 1 for s in scales) or any(a >= b for a, b in zip(scales, scales[1:])):
            raise InvalidConfig(f"ppm_scales must be strictly increasing positive integers, got {self.ppm_scales}")
        if len(self.atrous_rates) != 2 or any(r < 1 for r in self.atrous_rates):
            raise InvalidConfig(f"atrous_rates must be two positive dilation rates, got {self.atrous_rates}")

    @property
    def preset(self):
        return PRESETS[self.encoder_depth_preset]

    def to_dict(self):
        data = asdict(self)
        for key in ('ibn_stages', 'atrous_rates', 'ppm_scales'):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        for key in ('ibn_stages', 'atrous_rates', 'ppm_scales'):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


class IBN(nn.Module):
    """Half the channels instance-normalized, the other half batch-normalized."""

    def __init__(self, planes, ratio=0.5):
        super().__init__()
        self.half = int(planes * ratio)
        self.IN = nn.InstanceNorm2d(self.half, affine=True)
        self.BN = nn.BatchNorm2d(planes - self.half)

    def forward(self, x):
        split = torch.split(x, [self.half, x.size(1) - self.half], dim=1)
        return torch.cat([self.IN(split[0].contiguous()), self.BN(split[1].contiguous())], dim=1)


def _norm(planes, ibn):
    return IBN(planes) if ibn else nn.BatchNorm2d(planes)


def _downsample(inplanes, outplanes, stride):
    if stride == 1 and inplanes == outplanes:
        return None
    return nn.Sequential(
        nn.Conv2d(inplanes, outplanes, kernel_size=1, stride=stride, bias=False),
        nn.BatchNorm2d(outplanes),
    )


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, inplanes, planes, stride=1, dilation=1, ibn=False, groups=1):
        super().__init__()
        self.conv1 = nn.Conv2d(inplanes, planes, 3, stride=stride, padding=dilation, dilation=dilation, bias=False)
        self.bn1 = _norm(planes, ibn)
        self.conv2 = nn.Conv2d(planes, planes, 3, padding=dilation, dilation=dilation, groups=groups, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = _downsample(inplanes, planes, stride)

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, dilation=1, ibn=False, groups=1):
        super().__init__()
        outplanes = planes * self.expansion
        self.conv1 = nn.Conv2d(inplanes, planes, 1, bias=False)
        self.bn1 = _norm(planes, ibn)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=dilation, dilation=dilation,
                               groups=groups, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = nn.Conv2d(planes, outplanes, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(outplanes)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = _downsample(inplanes, outplanes, stride)

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


BLOCKS = {'basic': BasicBlock, 'bottleneck': Bottleneck}


def make_stage(block, inplanes, planes, blocks, stride=1, dilation=1, ibn=False, groups=1):
    layers = [block(inplanes, planes, stride=stride, dilation=dilation, ibn=ibn, groups=groups)]
    for _ in range(1, blocks):
        layers.append(block(planes * block.expansion, planes, dilation=dilation, ibn=ibn, groups=groups))
    return nn.Sequential(*layers)


class ResidualEncoder(nn.Module):
    """Five-stage residual encoder returning every stage output as a tap."""

    def __init__(self, preset: EncoderPreset, in_channels=3, ibn_stages=(), atrous=False, atrous_rates=(2, 4)):
        super().__init__()
        block = BLOCKS[preset.block]
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, preset.stem_width, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(preset.stem_width),
            nn.ReLU(inplace=True),
        )
        strides = (1, 2, 1 if atrous else 2, 1 if atrous else 2)
        dilations = (1, 1, atrous_rates[0] if atrous else 1, atrous_rates[1] if atrous else 1)
        stages = []
        inplanes = preset.stem_width
        for index, (planes, blocks, stride, dilation) in enumerate(zip(preset.widths, preset.blocks, strides, dilations)):
            stage = make_stage(block, inplanes, planes, blocks, stride=stride, dilation=dilation,
                               ibn=(index + 2) in ibn_stages)
            if index == 0:
                stage = nn.Sequential(nn.MaxPool2d(3, stride=2, padding=1), stage)
            stages.append(stage)
            inplanes = planes * block.expansion
        self.stages = nn.ModuleList(stages)
        self.out_channels = [preset.stem_width] + [w * block.expansion for w in preset.widths]

    def forward(self, x):
        taps = [self.stem(x)]
        for stage in self.stages:
            taps.append(stage(taps[-1]))
        return taps


class PyramidPooling(nn.Module):
    """Pooled branches projected to C/4 channels, upsampled and concatenated to the input."""

    def __init__(self, in_channels, scales=(1, 2, 3, 6)):
        super().__init__()
        branch_channels = max(1, in_channels // 4)
        self.branches = nn.ModuleList([
            nn.Sequential(
                nn.AdaptiveAvgPool2d(scale),
                nn.Conv2d(in_channels, branch_channels, kernel_size=1),
                nn.ReLU(inplace=True),
            )
            for scale in scales
        ])
        self.out_channels = in_channels + len(scales) * branch_channels

    def forward(self, x):
        size = x.shape[-2:]
        pooled = [F.interpolate(branch(x), size=size, mode='bilinear', align_corners=False) for branch in self.branches]
        return torch.cat([x] + pooled, dim=1)


class Center(nn.Module):
    def __init__(self, in_channels, out_channels, ppm_scales=None):
        super().__init__()
        self.ppm = PyramidPooling(in_channels, ppm_scales) if ppm_scales else None
        fused = self.ppm.out_channels if self.ppm is not None else in_channels
        self.fuse = nn.Sequential(
            nn.Conv2d(fused, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        if self.ppm is not None:
            x = self.ppm(x)
        return self.fuse(x)


class SCSEBlock(nn.Module):
    """Concurrent channel and spatial squeeze-excitation, combined by element-wise max."""

    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.cse = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, kernel_size=1),
            nn.Sigmoid(),
        )
        self.sse = nn.Sequential(nn.Conv2d(channels, 1, kernel_size=1), nn.Sigmoid())

    def channel_gate(self, x):
        return self.cse(x)

    def spatial_gate(self, x):
        return self.sse(x)

    def forward(self, x):
        return torch.max(x * self.channel_gate(x), x * self.spatial_gate(x))


def scse_apply(block: SCSEBlock, features: torch.Tensor) -> torch.Tensor:
    """Gate a C x h x w (or B x C x h x w) feature map."""
    if features.dim() == 3:
        return block(features.unsqueeze(0)).squeeze(0)
    return block(features)


class DecoderUnit(nn.Module):
    """Upsample, concatenate the skip, then an IN residual block and optional SCSE."""

    def __init__(self, in_channels, skip_channels, out_channels, scse=True):
        super().__init__()
        cin = in_channels + skip_channels
        self.conv1 = nn.Conv2d(cin, out_channels, 3, padding=1, bias=False)
        self.norm1 = nn.InstanceNorm2d(out_channels, affine=True)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.norm2 = nn.InstanceNorm2d(out_channels, affine=True)
        self.shortcut = nn.Sequential(
            nn.Conv2d(cin, out_channels, kernel_size=1, bias=False),
            nn.InstanceNorm2d(out_channels, affine=True),
        )
        self.relu = nn.ReLU(inplace=True)
        self.attention = SCSEBlock(out_channels) if scse else nn.Identity()

    def forward(self, x, size, skip=None):
        if tuple(x.shape[-2:]) != tuple(size):
            x = F.interpolate(x, size=size, mode='bilinear', align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        out = self.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        out = self.relu(out + self.shortcut(x))
        return self.attention(out)


class HypercolumnHead(nn.Module):
    def __init__(self, tap_channels: Sequence[int]):
        super().__init__()
        self.project = nn.Conv2d(sum(tap_channels), 1, kernel_size=1)

    def forward(self, taps, size=None):
        size = tuple(taps[-1].shape[-2:]) if size is None else tuple(size)
        upsampled = [
            t if tuple(t.shape[-2:]) == size else F.interpolate(t, size=size, mode='bilinear', align_corners=False)
            for t in taps
        ]
        return torch.sigmoid(self.project(torch.cat(upsampled, dim=1)))


def hypercolumn_head(head: HypercolumnHead, decoder_taps, size=None) -> torch.Tensor:
    """Per-pixel probability from coarse-to-fine decoder taps, at `size` or the finest tap's size."""
    return head(decoder_taps, size=size)


class CACUNet(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ResidualEncoder(cfg.preset, 3, cfg.ibn_stages, cfg.atrous, cfg.atrous_rates)
        enc = self.encoder.out_channels
        self.center_channels = min(enc[-1], 512)
        self.center = Center(enc[-1], self.center_channels, cfg.ppm_scales if cfg.ppm else None)
        self.decoder_channels = [max(self.center_channels // 2 ** i, 8) for i in range(5)]
        # D5..D2 take skips E4..E1; D1 restores input resolution without a skip
        skips = [enc[3], enc[2], enc[1], enc[0], 0]
        units = []
        in_channels = self.center_channels
        for skip_channels, out_channels in zip(skips, self.decoder_channels):
            units.append(DecoderUnit(in_channels, skip_channels, out_channels, scse=cfg.scse))
            in_channels = out_channels
        self.decoder = nn.ModuleList(units)
        if cfg.hypercolumn:
            self.head = HypercolumnHead(self.decoder_channels)
        else:
            self.head = nn.Conv2d(self.decoder_channels[-1], 1, kernel_size=1)

    @property
    def encoder_channels(self):
        return list(self.encoder.out_channels)

    def describe(self):
        return {
            'backbone': self.cfg.to_dict(),
            'encoder_channels': self.encoder_channels,
            'center_channels': self.center_channels,
            'decoder_channels': list(self.decoder_channels),
        }

    def forward_with_taps(self, x):
        if x.dim() != 4 or x.size(1) != 3:
            raise BadShape(f"expected a B x 3 x H x W batch, got {tuple(x.shape)}")
        if x.size(2) % 32 or x.size(3) % 32:
            raise BadShape(f"spatial size {tuple(x.shape[-2:])} must be divisible by 32")
        encoder_taps = self.encoder(x)
        out = self.center(encoder_taps[-1])
        skips = [encoder_taps[3], encoder_taps[2], encoder_taps[1], encoder_taps[0], None]
        decoder_taps = []
        for unit, skip in zip(self.decoder, skips):
            size = x.shape[-2:] if skip is None else skip.shape[-2:]
            out = unit(out, size, skip)
            decoder_taps.append(out)
        if self.cfg.hypercolumn:
            mask = hypercolumn_head(self.head, decoder_taps, size=x.shape[-2:])
        else:
            mask = torch.sigmoid(self.head(decoder_taps[-1]))
        return mask, tuple(encoder_taps), tuple(decoder_taps)

    def forward(self, x):
        return self.forward_with_taps(x)[0]


def build_backbone(cfg: BackboneConfig) -> CACUNet:
    model = CACUNet(cfg)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info(f"Built CAC-UNet ({cfg.encoder_depth_preset}, atrous={cfg.atrous}, ppm={cfg.ppm}, "
                f"scse={cfg.scse}, hypercolumn={cfg.hypercolumn}) with {n_params} parameters")
    return model


def forward_with_taps(model: CACUNet, batch: torch.Tensor):
    return model.forward_with_taps(batch)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    """Soft Dice loss per sample, averaged over the batch."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    dims = tuple(range(1, pred.dim()))
    intersection = (pred * target).sum(dim=dims)
    total = pred.sum(dim=dims) + target.sum(dim=dims)
    return (1 - (2 * intersection + smooth) / (total + smooth)).mean()
