"""Full encoder-decoder network with attention-gated skips and fusion modules."""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, Tuple

import torch
import torch.nn as nn

from .blocks import ASPP_RATES, AttentionGate, BlockConfig, DilatedConvBlock, Downsample, Upsample
from .fusion import BRANCHES, CDA2F, MSC2F, Cda2fConfig, Msc2fConfig

N_LEVELS = 4  # downsampling steps; the fifth width belongs to the bottleneck


@dataclass
class ModelConfig:
    channels: Tuple[int, ...] = (16, 32, 64, 128, 256)
    num_classes: int = 3
    input_channels: int = 1
    dropout_rate: float = 0.2
    use_msc2f: bool = True
    use_cda2f: bool = True
    use_attention_gates: bool = True
    # reference patch size; fixes the stored resolution of the spectral masks
    patch_shape: Tuple[int, int, int] = (96, 96, 64)
    dilation: Tuple[int, int, int] = (2, 2, 2)
    aspp_rates: Tuple[Tuple[int, int, int], ...] = ASPP_RATES
    log_sigma: float = 1.0
    log_size: int = 5
    eca_kernel: int = 3
    cda2f_branches: Tuple[str, ...] = BRANCHES
    drop_path_rate: float = 0.1
    axial_heads: int = 4
    fusion_scale: float = 1.0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.patch_shape = tuple(int(s) for s in self.patch_shape)
        self.dilation = tuple(int(d) for d in self.dilation)
        self.aspp_rates = tuple(tuple(int(a) for a in r) for r in self.aspp_rates)
        self.cda2f_branches = tuple(self.cda2f_branches)
        self.validate()

    def validate(self):
        if len(self.channels) != N_LEVELS + 1:
            raise ValueError(f"channels must have {N_LEVELS + 1} entries, got {len(self.channels)}")
        if any(c < 1 for c in self.channels) or any(a >= b for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError(f"channels must be positive and strictly increasing: {self.channels}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if len(self.patch_shape) != 3:
            raise ValueError("patch_shape must have three entries")
        check_divisible(self.patch_shape)
        if self.use_cda2f and self.channels[N_LEVELS - 1] % self.axial_heads:
            raise ValueError(
                f"level-4 width {self.channels[N_LEVELS - 1]} not divisible by {self.axial_heads} axial heads"
            )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def spatial_at(self, level: int) -> Tuple[int, int, int]:
        """Patch size after ``level`` downsamplings (0 = input resolution)."""
        return tuple(s // 2**level for s in self.patch_shape)

    def block(self, c_in: int, c_out: int) -> BlockConfig:
        return BlockConfig(c_in, c_out, dilation=self.dilation, drop_path_rate=self.drop_path_rate,
                           eca_kernel=self.eca_kernel, heads=self.axial_heads)

    def cda2f(self, level: int) -> Cda2fConfig:
        return Cda2fConfig(
            channels=self.channels[level], spatial_shape=self.spatial_at(level),
            branches=self.cda2f_branches, fusion_scale=self.fusion_scale,
            drop_path_rate=self.drop_path_rate, axial_heads=self.axial_heads,
        )

    def msc2f(self) -> Msc2fConfig:
        return Msc2fConfig(
            channels=self.channels[N_LEVELS], spatial_shape=self.spatial_at(N_LEVELS),
            log_sigma=self.log_sigma, log_size=self.log_size,
            aspp_rates=self.aspp_rates, eca_kernel=self.eca_kernel,
        )


def check_divisible(shape, factor: int = 2**N_LEVELS) -> None:
    for axis, n in zip("DHW", shape):
        if n % factor:
            raise ValueError(f"spatial axis {axis} has size {n}, which is not divisible by {factor}")


class EncoderLevel(nn.Module):
    def __init__(self, cfg: ModelConfig, c_in: int, level: int, fusion: bool):
        super().__init__()
        self.block = DilatedConvBlock(cfg.block(c_in, cfg.channels[level]))
        self.cda2f = CDA2F(cfg.cda2f(level)) if fusion else None
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, x):
        x = self.block(x)
        if self.cda2f is not None:
            x = self.cda2f(x)
        return self.dropout(x)


class Bottleneck(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.block = DilatedConvBlock(cfg.block(cfg.channels[N_LEVELS - 1], cfg.channels[N_LEVELS]))
        self.msc2f = MSC2F(cfg.msc2f()) if cfg.use_msc2f else None

    def forward(self, x):
        x = self.block(x)
        return self.msc2f(x) if self.msc2f is not None else x


class DecoderLevel(nn.Module):
    def __init__(self, cfg: ModelConfig, level: int, fusion: bool):
        super().__init__()
        c_deep, c = cfg.channels[level + 1], cfg.channels[level]
        self.up = Upsample(c_deep, c)
        self.gate = AttentionGate(c, c_deep) if cfg.use_attention_gates else None
        self.block = DilatedConvBlock(cfg.block(2 * c, c))
        self.cda2f = CDA2F(cfg.cda2f(level)) if fusion else None
        self.dropout = nn.Dropout(cfg.dropout_rate)

    def forward(self, deep, skip):
        if self.gate is not None:
            skip = self.gate(skip, deep)
        x = self.block(torch.cat([skip, self.up(deep)], dim=1))
        if self.cda2f is not None:
            x = self.cda2f(x)
        return self.dropout(x)


class NeuroVascUNet(nn.Module):
    """Five-level 3D U-Net with a dilated block at every level, CDA2F after the
    level-4 blocks on both paths, MSC2F in the bottleneck, and a 1x1x1 head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        c_in = cfg.input_channels
        self.encoders = nn.ModuleList()
        for level in range(N_LEVELS):
            self.encoders.append(EncoderLevel(cfg, c_in, level, fusion=cfg.use_cda2f and level == N_LEVELS - 1))
            c_in = ch[level]
        self.down = Downsample()
        self.bottleneck = Bottleneck(cfg)
        self.decoders = nn.ModuleList(
            DecoderLevel(cfg, level, fusion=cfg.use_cda2f and level == N_LEVELS - 1) for level in range(N_LEVELS)
        )
        self.head = nn.Conv3d(ch[0], cfg.num_classes, kernel_size=1)

    def forward(self, x):
        if x.dim() != 5:
            raise ValueError(f"expected input of shape (B, C, D, H, W), got {tuple(x.shape)}")
        if x.shape[1] != self.cfg.input_channels:
            raise ValueError(f"expected {self.cfg.input_channels} input channels, got {x.shape[1]}")
        check_divisible(x.shape[2:])
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.down(x)
        x = self.bottleneck(x)
        for level in reversed(range(N_LEVELS)):
            x = self.decoders[level](x, skips[level])
        return self.head(x)

    def encoder_widths(self):
        """Channel count produced at each encoder level and the bottleneck."""
        widths = [enc.block.cfg.out_channels for enc in self.encoders]
        return widths + [self.bottleneck.block.cfg.out_channels]


def build_model(cfg: ModelConfig) -> NeuroVascUNet:
    cfg.validate()
    return NeuroVascUNet(cfg)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


@dataclass
class NetworkSummary:
    parameter_count: int
    breakdown: Dict[str, int] = field(default_factory=dict)
    input_shape: Tuple[int, ...] = ()
    output_shape: Tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "parameter_count": self.parameter_count,
            "breakdown": dict(self.breakdown),
            "input_shape": list(self.input_shape),
            "output_shape": list(self.output_shape),
        }


def summarize(model: NeuroVascUNet) -> NetworkSummary:
    """Exact learnable-scalar count, broken down per top-level submodule.

    Fusion modules and attention gates get their own entries so they can be
    audited separately from the convolution blocks that surround them.
    """
    cfg = model.cfg
    breakdown: "OrderedDict[str, int]" = OrderedDict()
    for i, enc in enumerate(model.encoders, start=1):
        breakdown[f"encoder{i}.block"] = count_parameters(enc.block)
        if enc.cda2f is not None:
            breakdown[f"encoder{i}.cda2f"] = count_parameters(enc.cda2f)
    breakdown["bottleneck.block"] = count_parameters(model.bottleneck.block)
    if model.bottleneck.msc2f is not None:
        breakdown["bottleneck.msc2f"] = count_parameters(model.bottleneck.msc2f)
    for i in reversed(range(N_LEVELS)):
        dec = model.decoders[i]
        breakdown[f"decoder{i + 1}.up"] = count_parameters(dec.up)
        if dec.gate is not None:
            breakdown[f"decoder{i + 1}.attention_gate"] = count_parameters(dec.gate)
        breakdown[f"decoder{i + 1}.block"] = count_parameters(dec.block)
        if dec.cda2f is not None:
            breakdown[f"decoder{i + 1}.cda2f"] = count_parameters(dec.cda2f)
    breakdown["head"] = count_parameters(model.head)
    total = count_parameters(model)
    accounted = sum(breakdown.values())
    if accounted != total:
        raise RuntimeError(f"parameter breakdown covers {accounted} of {total} parameters")
    shape = (1, cfg.input_channels) + cfg.patch_shape
    return NetworkSummary(total, dict(breakdown), shape, (1, cfg.num_classes) + cfg.patch_shape)
