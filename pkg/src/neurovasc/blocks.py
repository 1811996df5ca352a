"""Differentiable 3D building blocks shared by the fusion modules and the network.

All blocks take and return tensors laid out as (B, C, D, H, W) and, apart from
:class:`Downsample` and :class:`Upsample`, preserve the spatial size.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

Triple = Tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


def _same_padding(kernel_size: Triple, dilation: Triple) -> Triple:
    return tuple(d * (k - 1) // 2 for k, d in zip(kernel_size, dilation))


def _check_channels(x: torch.Tensor, expected: int, name: str) -> None:
    if x.dim() != 5:
        raise ValueError(f"{name}: expected a (B, C, D, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ValueError(f"{name}: expected {expected} input channels, got {x.shape[1]}")


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    dilation: Triple = (2, 2, 2)
    kernel_size: Triple = (3, 3, 3)
    drop_path_rate: float = 0.1
    eca_kernel: int = 3
    heads: int = 4

    def __post_init__(self):
        self.dilation = _triple(self.dilation)
        self.kernel_size = _triple(self.kernel_size)
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if not 0.0 <= self.drop_path_rate <= 1.0:
            raise ValueError("drop_path_rate must lie in [0, 1]")
        if self.eca_kernel < 1 or self.eca_kernel % 2 == 0:
            raise ValueError("eca_kernel must be a positive odd integer")
        if any(k % 2 == 0 for k in self.kernel_size):
            raise ValueError("kernel extents must be odd to preserve spatial size")


class DilatedConvBlock(nn.Module):
    """Two [dilated conv -> BN -> ReLU] units with size-preserving padding."""

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        self.cfg = cfg
        pad = _same_padding(cfg.kernel_size, cfg.dilation)
        layers = []
        c_in = cfg.in_channels
        for _ in range(2):
            layers += [
                nn.Conv3d(c_in, cfg.out_channels, cfg.kernel_size, padding=pad, dilation=cfg.dilation, bias=False),
                nn.BatchNorm3d(cfg.out_channels),
                nn.ReLU(inplace=True),
            ]
            c_in = cfg.out_channels
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        _check_channels(x, self.cfg.in_channels, "DilatedConvBlock")
        return self.body(x)


class Downsample(nn.Module):
    """2x2x2 max pooling; refuses odd spatial sizes rather than silently flooring."""

    def forward(self, x):
        for axis, n in zip("DHW", x.shape[2:]):
            if n % 2:
                raise ValueError(f"Downsample: spatial axis {axis} has odd size {n}")
        return F.max_pool3d(x, kernel_size=2, stride=2)


class Upsample(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_channels, out_channels, kernel_size=2, stride=2)

    def forward(self, x):
        return self.up(x)


class AttentionGate(nn.Module):
    """Additive grid attention on a skip connection.

    ``g`` comes from one level deeper, so its spatial size is half that of
    ``x_skip``. The skip is projected with a stride-2 convolution to meet the
    gate, the coefficient field is computed there and trilinearly resampled back.
    """

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: Optional[int] = None):
        super().__init__()
        inter_channels = inter_channels or max(1, skip_channels // 2)
        self.theta_x = nn.Conv3d(skip_channels, inter_channels, kernel_size=2, stride=2, bias=False)
        self.phi_g = nn.Conv3d(gate_channels, inter_channels, kernel_size=1)
        self.psi = nn.Conv3d(inter_channels, 1, kernel_size=1)

    def coefficients(self, x_skip, g):
        if x_skip.dim() != 5 or g.dim() != 5:
            raise ValueError("AttentionGate expects 5D tensors")
        if any(s != 2 * t for s, t in zip(x_skip.shape[2:], g.shape[2:])):
            raise ValueError(
                f"AttentionGate: skip spatial size {tuple(x_skip.shape[2:])} must be twice "
                f"the gate spatial size {tuple(g.shape[2:])}"
            )
        field = self.psi(F.relu(self.theta_x(x_skip) + self.phi_g(g)))
        alpha = torch.sigmoid(field)
        return F.interpolate(alpha, size=x_skip.shape[2:], mode="trilinear", align_corners=False)

    def forward(self, x_skip, g):
        return x_skip * self.coefficients(x_skip, g)


ASPP_RATES: Tuple[Triple, ...] = ((1, 1, 1), (1, 2, 2), (1, 3, 3))


class _ASPPBranch(nn.Module):
    def __init__(self, channels: int, rate: Triple):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 3, padding=rate, dilation=rate, bias=False)
        self.bn = nn.BatchNorm3d(channels)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class ASPP(nn.Module):
    """Parallel dilated 3x3x3 branches, concatenated and fused back to ``channels``."""

    def __init__(self, channels: int, rates: Sequence[Triple] = ASPP_RATES):
        super().__init__()
        self.channels = channels
        self.rates = tuple(_triple(r) for r in rates)
        self.branches = nn.ModuleList(_ASPPBranch(channels, r) for r in self.rates)
        self.fuse = nn.Sequential(
            nn.Conv3d(channels * len(self.rates), channels, kernel_size=1, bias=False),
            nn.BatchNorm3d(channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        _check_channels(x, self.channels, "ASPP")
        return self.fuse(torch.cat([b(x) for b in self.branches], dim=1))


def log_kernel(sigma: float = 1.0, size: int = 5, dc_correct: bool = True, dtype=torch.float64) -> torch.Tensor:
    """Sampled 3D Laplacian-of-Gaussian kernel of shape (size, size, size).

    With ``dc_correct`` the mean weight is subtracted so the kernel sums to zero.
    """
    if size % 2 == 0 or size < 1:
        raise ValueError("LoG kernel size must be a positive odd integer")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    half = size // 2
    ax = torch.arange(-half, half + 1, dtype=torch.float64)
    zz, yy, xx = torch.meshgrid(ax, ax, ax, indexing="ij")
    r2 = xx**2 + yy**2 + zz**2
    s2 = 2.0 * sigma**2
    k = -1.0 / (math.pi * sigma**4) * (1.0 - r2 / s2) * torch.exp(-r2 / s2)
    if dc_correct:
        k = k - k.mean()
    return k.to(dtype)


class LoGFilter(nn.Module):
    """Fixed, depthwise Laplacian-of-Gaussian filtering (the edge token)."""

    def __init__(self, channels: int, sigma: float = 1.0, size: int = 5):
        super().__init__()
        self.channels = channels
        self.sigma = sigma
        self.size = size
        self.register_buffer("kernel", log_kernel(sigma, size).to(torch.get_default_dtype()))

    def forward(self, x):
        c = x.shape[1]
        w = self.kernel.to(x.dtype).expand(c, 1, self.size, self.size, self.size)
        return F.conv3d(x, w, padding=self.size // 2, groups=c)


class SpectralMask(nn.Module):
    """Real learnable mask over the full 3D spectrum, shared across batch and channels.

    The mask is stored at a reference spectrum size. Feature maps with another
    spatial size see the mask resampled over centred frequency coordinates, so a
    model trained on one patch size still runs on another.
    """

    def __init__(self, spatial_shape: Sequence[int]):
        super().__init__()
        self.spatial_shape = _triple(spatial_shape)
        self.weight = nn.Parameter(torch.ones(self.spatial_shape))

    def resolve(self, size: Sequence[int]) -> torch.Tensor:
        size = tuple(int(s) for s in size)
        if size == self.spatial_shape:
            return self.weight
        centred = torch.fft.fftshift(self.weight, dim=(0, 1, 2))[None, None]
        resized = F.interpolate(centred, size=size, mode="trilinear", align_corners=True)[0, 0]
        return torch.fft.ifftshift(resized, dim=(0, 1, 2))


class FSA(nn.Module):
    """Frequency-spatial attention: ``Re(ifft3(M * fft3(x)))``."""

    def __init__(self, spatial_shape: Sequence[int]):
        super().__init__()
        self.mask = SpectralMask(spatial_shape)

    def forward(self, x):
        m = self.mask.resolve(x.shape[2:]).to(x.dtype)
        spec = torch.fft.fftn(x, dim=(-3, -2, -1))
        return torch.fft.ifftn(spec * m, dim=(-3, -2, -1)).real


class ECA(nn.Module):
    """Efficient channel attention (global pool -> 1D conv over channels -> sigmoid)."""

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError("ECA kernel width must be odd")
        self.conv = nn.Conv1d(1, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def scales(self, x):
        pooled = x.mean(dim=(2, 3, 4))  # (B, C)
        return torch.sigmoid(self.conv(pooled.unsqueeze(1))).squeeze(1)

    def forward(self, x):
        return x * self.scales(x)[:, :, None, None, None]


class DepthwiseConv3d(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels)

    def forward(self, x):
        return self.conv(x)


def _neighbourhood(x: torch.Tensor, k: int) -> torch.Tensor:
    """Stack the k^3 shifted copies of ``x``: (B, C, D, H, W) -> (B, C, k^3, D, H, W)."""
    p = k // 2
    d, h, w = x.shape[2:]
    xp = F.pad(x, (p, p, p, p, p, p))
    views = [
        xp[:, :, i:i + d, j:j + h, l:l + w]
        for i, j, l in itertools.product(range(k), repeat=3)
    ]
    return torch.stack(views, dim=2)


class Involution3d(nn.Module):
    """Location-specific, channel-shared kernels generated from the input itself."""

    def __init__(self, channels: int, kernel_size: int = 3, groups: int = 1, reduction: int = 4):
        super().__init__()
        if channels % groups:
            raise ValueError(f"Involution3d: {channels} channels not divisible by {groups} groups")
        self.channels = channels
        self.kernel_size = kernel_size
        self.groups = groups
        hidden = max(1, channels // reduction)
        self.reduce = nn.Conv3d(channels, hidden, kernel_size=1)
        self.expand = nn.Conv3d(hidden, kernel_size**3 * groups, kernel_size=1)

    def generate_kernel(self, x):
        return self.expand(F.relu(self.reduce(x)))

    def forward(self, x):
        _check_channels(x, self.channels, "Involution3d")
        b, c, d, h, w = x.shape
        kk = self.kernel_size**3
        weight = self.generate_kernel(x).view(b, self.groups, 1, kk, d, h, w)
        patches = _neighbourhood(x, self.kernel_size).view(b, self.groups, c // self.groups, kk, d, h, w)
        return (weight * patches).sum(dim=3).view(b, c, d, h, w)


def radial_index(size: int = 5) -> Tuple[torch.Tensor, Tuple[int, ...]]:
    """Map every offset of a cubic support to the index of its squared radius.

    Returns the (size, size, size) index tensor and the sorted distinct squared radii.
    """
    half = size // 2
    ax = torch.arange(-half, half + 1)
    zz, yy, xx = torch.meshgrid(ax, ax, ax, indexing="ij")
    r2 = xx**2 + yy**2 + zz**2
    radii = tuple(sorted(set(r2.flatten().tolist())))
    lookup = {r: i for i, r in enumerate(radii)}
    idx = torch.tensor([lookup[v] for v in r2.flatten().tolist()]).view(size, size, size)
    return idx, radii


class SphericalConv3d(nn.Module):
    """Convolution with weights tied across offsets of equal radius.

    A radially symmetric kernel makes the layer commute exactly with the 24
    rotations of the voxel grid.
    """

    def __init__(self, in_channels: int, out_channels: Optional[int] = None, size: int = 5):
        super().__init__()
        out_channels = out_channels or in_channels
        idx, radii = radial_index(size)
        self.size = size
        self.register_buffer("index", idx, persistent=False)
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, len(radii)))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        fan_in = in_channels * size**3
        nn.init.uniform_(self.weight, -1.0 / math.sqrt(fan_in), 1.0 / math.sqrt(fan_in))

    @property
    def n_radii(self) -> int:
        return self.weight.shape[-1]

    def kernel(self) -> torch.Tensor:
        return self.weight[:, :, self.index]

    def forward(self, x):
        return F.conv3d(x, self.kernel(), self.bias, padding=self.size // 2)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, D, H, W) tensor."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


class ConvNeXt3dBlock(nn.Module):
    def __init__(self, channels: int, kernel_size: int = 5, expansion: int = 4):
        super().__init__()
        self.dwconv = nn.Conv3d(channels, channels, kernel_size, padding=kernel_size // 2, groups=channels)
        self.norm = ChannelLayerNorm(channels)
        self.pw1 = nn.Conv3d(channels, expansion * channels, kernel_size=1)
        self.pw2 = nn.Conv3d(expansion * channels, channels, kernel_size=1)

    def forward(self, x):
        y = self.pw2(F.gelu(self.pw1(self.norm(self.dwconv(x)))))
        return x + y


def stochastic_depth(
    x: torch.Tensor,
    branch: torch.Tensor,
    rate: float,
    training: bool,
    generator: Optional[torch.Generator] = None,
) -> torch.Tensor:
    """Residual add with per-sample branch dropping at train time.

    Training: each sample keeps ``branch / (1 - rate)`` with probability
    ``1 - rate``, otherwise gets ``x`` alone. ``rate == 1`` drops the branch always.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("stochastic depth rate must lie in [0, 1]")
    if not training or rate == 0.0:
        return x + branch
    if rate == 1.0:
        return x.clone()
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.dim() - 1)
    u = torch.rand(shape, generator=generator, dtype=x.dtype, device=x.device)
    mask = (u < keep).to(x.dtype)
    return x + branch * mask / keep


class StochasticDepth(nn.Module):
    def __init__(self, rate: float = 0.1):
        super().__init__()
        self.rate = rate

    def forward(self, x, branch):
        return stochastic_depth(x, branch, self.rate, self.training)


class AxialAttention(nn.Module):
    """Multi-head self-attention along one spatial axis with per-head sigmoid gates.

    Relative positions enter as a learned per-head logit bias, clipped at
    ``max_distance`` so the layer accepts any axis length.
    """

    def __init__(self, channels: int, axis: int, heads: int = 4, max_distance: int = 32, gate_bias: float = -4.0):
        super().__init__()
        if channels % heads:
            raise ValueError(f"AxialAttention: {channels} channels not divisible by {heads} heads")
        if axis not in (2, 3, 4):
            raise ValueError("axis must index D, H or W (2, 3 or 4)")
        self.channels = channels
        self.axis = axis
        self.heads = heads
        self.head_dim = channels // heads
        self.max_distance = max_distance
        self.qkv = nn.Linear(channels, 3 * channels, bias=False)
        self.proj = nn.Linear(channels, channels)
        self.rel_bias = nn.Parameter(torch.zeros(2 * max_distance + 1, heads))
        self.gate = nn.Parameter(torch.full((heads,), float(gate_bias)))
        nn.init.trunc_normal_(self.rel_bias, std=0.02)

    def _relative_bias(self, n: int, device) -> torch.Tensor:
        pos = torch.arange(n, device=device)
        rel = (pos[None, :] - pos[:, None]).clamp(-self.max_distance, self.max_distance) + self.max_distance
        return self.rel_bias[rel].permute(2, 0, 1)  # (heads, n, n)

    def attention(self, x):
        """Return (per-head output, attention weights) for the sequences along ``axis``."""
        seq = x.movedim(1, -1).movedim(self.axis - 1, -2)  # (..., L, C)
        lead = seq.shape[:-2]
        n = seq.shape[-2]
        seq = seq.reshape(-1, n, self.channels)
        q, k, v = self.qkv(seq).chunk(3, dim=-1)

        def split(t):
            return t.view(t.shape[0], n, self.heads, self.head_dim).transpose(1, 2)

        q, k, v = split(q), split(k), split(v)
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim) + self._relative_bias(n, x.device).to(q.dtype)
        attn = logits.softmax(dim=-1)
        out = attn @ v  # (N, heads, L, head_dim)
        return out, attn, lead, n

    def forward(self, x):
        out, _, lead, n = self.attention(x)
        out = out * torch.sigmoid(self.gate).to(out.dtype)[None, :, None, None]
        out = self.proj(out.transpose(1, 2).reshape(-1, n, self.channels))
        out = out.view(*lead, n, self.channels).movedim(-2, self.axis - 1).movedim(-1, 1)
        return x + out


class GatedAxialLayer(nn.Module):
    """Gated axial attention along D, then H, then W."""

    def __init__(self, channels: int, heads: int = 4, max_distance: int = 32, gate_bias: float = -4.0):
        super().__init__()
        self.passes = nn.ModuleList(
            AxialAttention(channels, axis, heads, max_distance, gate_bias) for axis in (2, 3, 4)
        )

    def forward(self, x):
        for p in self.passes:
            x = p(x)
        return x
