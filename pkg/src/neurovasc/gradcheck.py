"""Central finite-difference gradient checks at double precision.

Each check reduces a module's output to a scalar with a fixed random
projection, perturbs sampled entries of the inputs and parameters by
``+-eps``, and compares the difference quotients against autograd. The
reported error for one tensor is ``||g_analytic - g_numeric|| / max(||g_analytic||, ||g_numeric||)``
over the sampled entries; a check's error is the maximum over its tensors.
Gradient pairs whose norms both fall below ``ZERO_GRAD`` count as agreeing,
since the difference quotient of an identically-zero gradient is pure noise.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from . import blocks
from .fusion import CDA2F, MSC2F, Cda2fConfig, Msc2fConfig
from .losses import LossConfig, PredictionPair, hybrid_loss
from .network import ModelConfig, build_model

BLOCK_TOL = 1e-4
NETWORK_TOL = 1e-3
ZERO_GRAD = 1e-8


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_entries: int
    seconds: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel(a: torch.Tensor, n: torch.Tensor) -> float:
    scale = max(a.norm().item(), n.norm().item())
    if scale < ZERO_GRAD:
        return 0.0
    return (a - n).norm().item() / scale


def check_gradients(
    fn: Callable[[], torch.Tensor],
    tensors: Dict[str, torch.Tensor],
    max_entries: Optional[int] = 24,
    eps: float = 1e-6,
    generator: Optional[torch.Generator] = None,
) -> Tuple[float, int, Dict[str, float]]:
    """Compare autograd against central differences for a scalar ``fn()``.

    ``tensors`` must be leaf double tensors that ``fn`` reads. At most
    ``max_entries`` randomly chosen entries of each tensor are probed.
    """
    for t in tensors.values():
        if t.dtype != torch.float64:
            raise TypeError("gradient checks require float64 tensors")
        t.grad = None
    out = fn()
    if out.dim() != 0:
        raise ValueError("fn must return a scalar")
    grads = torch.autograd.grad(out, list(tensors.values()), allow_unused=True)
    per_tensor = {}
    n_total = 0
    with torch.no_grad():
        for (name, t), g in zip(tensors.items(), grads):
            g = torch.zeros_like(t) if g is None else g
            flat = t.view(-1)
            n = flat.numel()
            if max_entries is None or n <= max_entries:
                idx = torch.arange(n)
            else:
                idx = torch.randperm(n, generator=generator)[:max_entries]
            numeric = torch.empty(len(idx), dtype=torch.float64)
            for j, i in enumerate(idx.tolist()):
                orig = flat[i].item()
                flat[i] = orig + eps
                plus = fn().item()
                flat[i] = orig - eps
                minus = fn().item()
                flat[i] = orig
                numeric[j] = (plus - minus) / (2 * eps)
            per_tensor[name] = _rel(g.reshape(-1)[idx], numeric)
            n_total += len(idx)
    return max(per_tensor.values(), default=0.0), n_total, per_tensor


def randomize_parameters(module: nn.Module, generator: torch.Generator, std: float = 0.5) -> nn.Module:
    """Overwrite every parameter with N(0, std^2) draws so no path is inert."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * std)
    return module


def module_check(
    name: str,
    module: nn.Module,
    inputs: Sequence[torch.Tensor],
    train_mode: bool = False,
    include_inputs: bool = True,
    max_entries: Optional[int] = 24,
    seed: int = 0,
    tolerance: float = BLOCK_TOL,
    randomize: bool = True,
    param_filter: Optional[Callable[[str], bool]] = None,
) -> GradCheckResult:
    g = torch.Generator().manual_seed(seed)
    module = module.double()
    if randomize:
        randomize_parameters(module, g)
    module.train(train_mode)
    inputs = [x.detach().double().requires_grad_(True) for x in inputs]
    with torch.no_grad():
        probe = module(*inputs)
    proj = torch.randn(probe.shape, generator=g, dtype=torch.float64)

    def fn():
        return (module(*inputs) * proj).sum()

    tensors = {f"input{i}": x for i, x in enumerate(inputs)} if include_inputs else {}
    for pname, p in module.named_parameters():
        if param_filter is None or param_filter(pname):
            tensors[pname] = p
    t0 = time.perf_counter()
    err, n, _ = check_gradients(fn, tensors, max_entries, generator=g)
    return GradCheckResult(name, err, n, time.perf_counter() - t0, tolerance)


def _x(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def block_checks() -> List[GradCheckResult]:
    c, s = 4, (6, 6, 6)
    x = _x(1, c, *s)
    return [
        module_check("dilated_conv_block", blocks.DilatedConvBlock(blocks.BlockConfig(c, c)), [x], train_mode=True),
        module_check("attention_gate", blocks.AttentionGate(c, c), [x, _x(1, c, 3, 3, 3, seed=1)]),
        module_check("upsample", blocks.Upsample(c, c), [_x(1, c, 3, 3, 3, seed=2)]),
        module_check("aspp", blocks.ASPP(c), [x], train_mode=True),
        module_check("log_filter", blocks.LoGFilter(c), [x]),
        module_check("fsa_mask", blocks.FSA(s), [x]),
        module_check("eca", blocks.ECA(3), [x]),
        module_check("depthwise_conv3d", blocks.DepthwiseConv3d(c), [x]),
        module_check("involution3d", blocks.Involution3d(c, reduction=2), [x]),
        module_check("spherical_conv3d", blocks.SphericalConv3d(c), [x]),
        module_check("convnext3d_block", blocks.ConvNeXt3dBlock(c), [x]),
        module_check("gated_axial_layer", blocks.GatedAxialLayer(c, heads=2, max_distance=4), [x]),
    ]


def loss_checks() -> List[GradCheckResult]:
    g = torch.Generator().manual_seed(3)
    logits = torch.randn(1, 3, 4, 4, 4, generator=g, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 3, (1, 4, 4, 4), generator=g)
    cfg = LossConfig(alpha=2.0, beta=1.0, class_weights=(1.0, 8.5744, 14.007))

    def fn():
        return hybrid_loss(PredictionPair.from_logits(logits, labels), cfg)

    t0 = time.perf_counter()
    err, n, _ = check_gradients(fn, {"logits": logits}, max_entries=None, generator=g)
    return [GradCheckResult("hybrid_loss", err, n, time.perf_counter() - t0, BLOCK_TOL)]


def fusion_checks() -> List[GradCheckResult]:
    c, s = 4, (6, 6, 6)
    x = _x(1, c, *s, seed=4)
    msc = MSC2F(Msc2fConfig(channels=c, spatial_shape=s))
    cda = CDA2F(Cda2fConfig(channels=c, spatial_shape=s, axial_heads=2))
    return [
        module_check("msc2f", msc, [x], train_mode=True, max_entries=12),
        module_check("cda2f", cda, [x], max_entries=12),
    ]


def network_check(n_params: int = 24, seed: int = 0) -> GradCheckResult:
    """Spot-check ``n_params`` randomly chosen scalar parameters of a scaled-down network."""
    cfg = ModelConfig(channels=(2, 3, 4, 8, 10), patch_shape=(16, 16, 16), axial_heads=4)
    model = build_model(cfg).double().eval()
    g = torch.Generator().manual_seed(seed)
    x = _x(1, 1, 16, 16, 16, seed=5)
    with torch.no_grad():
        proj = torch.randn(model(x).shape, generator=g, dtype=torch.float64)
    params = [p for p in model.parameters()]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    # choose tensors with probability proportional to size, then one entry in each
    picks = torch.multinomial(sizes, n_params, replacement=True, generator=g).tolist()
    chosen = [(k, int(torch.randint(params[k].numel(), (1,), generator=g))) for k in picks]
    chosen = list(dict.fromkeys(chosen))

    def fn():
        return (model(x) * proj).sum()

    t0 = time.perf_counter()
    out = fn()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    analytic, numeric = [], []
    eps = 1e-6
    with torch.no_grad():
        for k, i in chosen:
            flat = params[k].view(-1)
            gk = grads[k]
            analytic.append(0.0 if gk is None else gk.view(-1)[i].item())
            orig = flat[i].item()
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            numeric.append((plus - minus) / (2 * eps))
    err = _rel(torch.tensor(analytic), torch.tensor(numeric))
    return GradCheckResult("network", err, len(chosen), time.perf_counter() - t0, NETWORK_TOL)


SCOPES = {
    "block": lambda: block_checks() + loss_checks(),
    "module": fusion_checks,
    "network": lambda: [network_check()],
}


def run_scope(scope: str) -> List[GradCheckResult]:
    if scope not in SCOPES:
        raise KeyError(f"unknown gradcheck scope {scope!r}; choose from {sorted(SCOPES)}")
    return SCOPES[scope]()
