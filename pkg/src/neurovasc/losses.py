"""Hybrid weighted cross-entropy + Dice loss and the class-weight rule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

LOG_FLOOR = 1e-12
# class-imbalance figures reported for the clinical training set
REPORTED_FRACTIONS = (0.9810, 0.0140, 0.0050)
REPORTED_BG_VESSEL_RATIO = 73.52
REPORTED_VESSEL_WEIGHT = 8.546


def class_weights_from_fractions(fractions: Sequence[float]) -> Tuple[float, ...]:
    """Background weight 1; class k weight sqrt(f_background / f_k)."""
    fr = [float(f) for f in fractions]
    if len(fr) < 2:
        raise ValueError("need at least two class fractions")
    if any(f <= 0 for f in fr):
        raise ValueError(f"class fractions must be positive, got {fr}")
    if abs(sum(fr) - 1.0) > 1e-6:
        raise ValueError(f"class fractions must sum to 1, got {sum(fr)}")
    return (1.0,) + tuple(math.sqrt(fr[0] / f) for f in fr[1:])


def weight_from_ratio(ratio: float) -> float:
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    return math.sqrt(ratio)


@dataclass
class LossConfig:
    alpha: float = 2.0
    beta: float = 1.0
    class_weights: Tuple[float, ...] = field(
        default_factory=lambda: class_weights_from_fractions(REPORTED_FRACTIONS)
    )
    epsilon: float = 1e-5

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class weights must be positive")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "class_weights": list(self.class_weights),
                "epsilon": self.epsilon}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def one_hot(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    """(B, D, H, W) integer labels -> (B, C, D, H, W) float one-hot."""
    return F.one_hot(labels.long(), num_classes).movedim(-1, 1).to(torch.get_default_dtype())


@dataclass
class PredictionPair:
    """Soft predictions and one-hot targets, both laid out (B, C, D, H, W)."""

    probs: torch.Tensor
    target: torch.Tensor

    def __post_init__(self):
        if self.probs.shape != self.target.shape:
            raise ValueError(f"probs {tuple(self.probs.shape)} and target {tuple(self.target.shape)} differ")
        if self.probs.dim() < 2:
            raise ValueError("expected a class axis at dim 1")

    @classmethod
    def from_logits(cls, logits: torch.Tensor, labels: torch.Tensor) -> "PredictionPair":
        return cls(logits.softmax(dim=1), one_hot(labels, logits.shape[1]).to(logits.dtype))

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def n_voxels(self) -> int:
        return self.probs.numel() // self.num_classes


def wce_loss(pair: PredictionPair, weights: Sequence[float]) -> torch.Tensor:
    """Mean over voxels of -sum_i w_i y_i log(p_i), log clamped at 1e-12."""
    w = torch.as_tensor(weights, dtype=pair.probs.dtype, device=pair.probs.device)
    if w.numel() != pair.num_classes:
        raise ValueError(f"{w.numel()} weights for {pair.num_classes} classes")
    shape = (1, -1) + (1,) * (pair.probs.dim() - 2)
    per_voxel = -(w.view(shape) * pair.target * torch.log(pair.probs.clamp_min(LOG_FLOOR))).sum(dim=1)
    return per_voxel.mean()


def soft_dice(p: torch.Tensor, t: torch.Tensor, epsilon: float = 1e-5) -> torch.Tensor:
    return (2.0 * (p * t).sum() + epsilon) / (p.sum() + t.sum() + epsilon)


def dice_loss(pair: PredictionPair, epsilon: float = 1e-5) -> torch.Tensor:
    """1 - soft DSC, averaged over the foreground classes (all classes but 0)."""
    losses = [1.0 - soft_dice(pair.probs[:, k], pair.target[:, k], epsilon) for k in range(1, pair.num_classes)]
    return torch.stack(losses).mean()


def hybrid_loss(pair: PredictionPair, cfg: Optional[LossConfig] = None) -> torch.Tensor:
    cfg = cfg or LossConfig()
    return cfg.alpha * wce_loss(pair, cfg.class_weights) + cfg.beta * dice_loss(pair, cfg.epsilon)
