"""PNG overlays of prediction errors: TP orange, FP red, FN green."""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import numpy as np
from PIL import Image

TP_COLOR = (255, 165, 0)
FP_COLOR = (255, 0, 0)
FN_COLOR = (0, 255, 0)
AXIAL_AXIS = 2


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    lo, hi = image.min(), image.max()
    g = np.zeros_like(image) if hi == lo else (image - lo) / (hi - lo)
    g = np.rint(g * 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=-1)


def overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray, class_k: int = 1) -> np.ndarray:
    """RGB uint8 image with error classes painted opaquely over the grayscale slice."""
    if not (image.shape == pred.shape == gt.shape) or image.ndim != 2:
        raise ValueError("overlay expects three 2D arrays of equal shape")
    rgb = _gray(image)
    p, g = pred == class_k, gt == class_k
    rgb[p & g] = TP_COLOR
    rgb[p & ~g] = FP_COLOR
    rgb[~p & g] = FN_COLOR
    return rgb


def mip_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray, class_k: int = 1,
                axis: int = AXIAL_AXIS) -> np.ndarray:
    """Maximum-intensity projection with projected TP/FP/FN rays (TP wins, then FP)."""
    rgb = _gray(np.max(image, axis=axis))
    p, g = pred == class_k, gt == class_k
    tp = np.any(p & g, axis=axis)
    fp = np.any(p & ~g, axis=axis) & ~tp
    fn = np.any(~p & g, axis=axis) & ~tp & ~fp
    rgb[fn] = FN_COLOR
    rgb[fp] = FP_COLOR
    rgb[tp] = TP_COLOR
    return rgb


def pick_slices(gt: np.ndarray, n: int = 3, class_k: int = 1, axis: int = AXIAL_AXIS) -> List[int]:
    """The ``n`` axial slices with the most ground-truth voxels of ``class_k`` (sorted)."""
    counts = np.sum(np.moveaxis(gt == class_k, axis, 0), axis=(1, 2))
    order = np.argsort(-counts, kind="stable")[:n]
    return sorted(int(i) for i in order)


def save_png(rgb: np.ndarray, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path)
    return path


def write_overlays(image, pred, gt, out_dir, stem: str, n_slices: int = 3, class_k: int = 1) -> List[Path]:
    """Per-slice PNGs, a horizontal montage of them, and a MIP overlay."""
    out_dir = Path(out_dir)
    slices = pick_slices(gt, n_slices, class_k)
    tiles = []
    written = []
    for k in slices:
        rgb = overlay(np.take(image, k, AXIAL_AXIS), np.take(pred, k, AXIAL_AXIS), np.take(gt, k, AXIAL_AXIS), class_k)
        tiles.append(rgb)
        written.append(save_png(rgb, out_dir / f"{stem}_axial{k:03d}.png"))
    if tiles:
        written.append(save_png(np.concatenate(tiles, axis=1), out_dir / f"{stem}_montage.png"))
    written.append(save_png(mip_overlay(image, pred, gt, class_k), out_dir / f"{stem}_mip.png"))
    return written


def has_color(rgb: np.ndarray, color: Sequence[int]) -> bool:
    return bool(np.any(np.all(rgb == np.asarray(color, dtype=np.uint8), axis=-1)))
