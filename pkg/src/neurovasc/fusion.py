"""The bottleneck fusion module (MSC2F) and the cross-domain block (CDA2F)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
import torch.nn as nn

from .blocks import (
    ASPP,
    ASPP_RATES,
    ECA,
    FSA,
    ConvNeXt3dBlock,
    DepthwiseConv3d,
    GatedAxialLayer,
    Involution3d,
    LoGFilter,
    SphericalConv3d,
    _check_channels,
    stochastic_depth,
)

BRANCHES = ("involution", "fsa", "spherical", "convnext")


@dataclass
class Msc2fConfig:
    channels: int
    spatial_shape: Tuple[int, int, int]
    log_sigma: float = 1.0
    log_size: int = 5
    aspp_rates: Sequence[Tuple[int, int, int]] = ASPP_RATES
    eca_kernel: int = 3

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("Msc2fConfig.channels must be >= 1")


@dataclass
class Cda2fConfig:
    channels: int
    spatial_shape: Tuple[int, int, int]
    branches: Tuple[str, ...] = BRANCHES
    fusion_scale: float = 1.0
    drop_path_rate: float = 0.1
    axial_heads: int = 4
    involution_kernel: int = 3
    involution_groups: int = 1
    involution_reduction: int = 4
    spherical_size: int = 5

    def __post_init__(self):
        self.branches = tuple(self.branches)
        unknown = set(self.branches) - set(BRANCHES)
        if unknown:
            raise ValueError(f"unknown CDA2F branches: {sorted(unknown)}")
        if not self.branches:
            raise ValueError("CDA2F needs at least one enabled branch")
        if not 0.0 <= self.drop_path_rate <= 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1]")


class MSC2F(nn.Module):
    """Multi-scale contextual fusion at the bottleneck.

    ASPP context, a LoG edge token and a spectral token are concatenated with
    the input, mixed depthwise, recalibrated by ECA, projected back to C, and
    fused with the ASPP features through two independent 1x1x1 convolutions.
    """

    def __init__(self, cfg: Msc2fConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        self.aspp = ASPP(c, cfg.aspp_rates)
        self.log = LoGFilter(c, cfg.log_sigma, cfg.log_size)
        self.fsa = FSA(cfg.spatial_shape)
        self.depthwise = DepthwiseConv3d(3 * c)
        self.eca = ECA(cfg.eca_kernel)
        self.restore = nn.Conv3d(3 * c, c, kernel_size=1)
        self.proj_aspp = nn.Conv3d(c, c, kernel_size=1)
        self.proj_refined = nn.Conv3d(c, c, kernel_size=1)

    def tokens(self, x):
        """Return ``(F_ASPP, composite)``; the composite stacks [input, edge, frequency]."""
        _check_channels(x, self.cfg.channels, "MSC2F")
        f_aspp = self.aspp(x)
        edge = self.log(f_aspp)
        freq = self.fsa(f_aspp)
        return f_aspp, torch.cat([x, edge, freq], dim=1)

    def forward(self, x):
        f_aspp, composite = self.tokens(x)
        refined = self.restore(self.eca(self.depthwise(composite)))
        return self.proj_aspp(f_aspp) + self.proj_refined(refined)


class CDA2F(nn.Module):
    """Cross-domain adaptive fusion.

    ``F = scale * (involution + fsa + spherical) + convnext(X)``, then a
    stochastic-depth residual onto ``X`` and a gated axial transformer layer.
    """

    def __init__(self, cfg: Cda2fConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels
        enabled = set(cfg.branches)
        self.involution = (
            Involution3d(c, cfg.involution_kernel, cfg.involution_groups, cfg.involution_reduction)
            if "involution" in enabled else None
        )
        self.fsa = FSA(cfg.spatial_shape) if "fsa" in enabled else None
        self.spherical = SphericalConv3d(c, c, cfg.spherical_size) if "spherical" in enabled else None
        self.convnext = ConvNeXt3dBlock(c) if "convnext" in enabled else None
        self.fusion_scale = nn.Parameter(torch.tensor(float(cfg.fusion_scale)))
        self.axial = GatedAxialLayer(c, heads=cfg.axial_heads)

    def multi_domain(self, x):
        parts = [m(x) for m in (self.involution, self.fsa, self.spherical) if m is not None]
        out = self.fusion_scale * sum(parts) if parts else torch.zeros_like(x)
        if self.convnext is not None:
            out = out + self.convnext(x)
        return out

    def forward(self, x, generator=None):
        _check_channels(x, self.cfg.channels, "CDA2F")
        fused = stochastic_depth(x, self.multi_domain(x), self.cfg.drop_path_rate, self.training, generator)
        return self.axial(fused)
