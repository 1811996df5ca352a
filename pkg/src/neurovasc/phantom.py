"""Synthetic vascular phantoms, preprocessing and augmentation.

Label codes: 0 background, 1 vessel, 2 tumor.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.interpolate import CubicSpline

LABEL_CODES = {0: "background", 1: "vessel", 2: "tumor"}
NUM_CLASSES = len(LABEL_CODES)
SPLITS = ("train", "val", "test")
# 100 train / 10 val / 27 test subjects
DEFAULT_SPLIT = (100, 10, 27)


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: Tuple[int, int, int] = (64, 64, 32)
    n_vessels: int = 6
    radius_range: Tuple[float, float] = (1.0, 3.0)
    tortuosity: float = 0.6
    n_lesions: int = 1
    lesion_radius_range: Tuple[float, float] = (3.0, 7.0)
    vessel_intensity_range: Tuple[float, float] = (170.0, 230.0)
    lesion_intensity_range: Tuple[float, float] = (110.0, 140.0)
    parenchyma_intensity_range: Tuple[float, float] = (40.0, 90.0)
    blur_sigma: float = 0.6
    seed: int = 0

    def __post_init__(self):
        for name in ("grid_shape", "radius_range", "lesion_radius_range", "vessel_intensity_range",
                     "lesion_intensity_range", "parenchyma_intensity_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self):
        if len(self.grid_shape) != 3 or min(self.grid_shape) < 16:
            raise ValueError(f"grid_shape entries must be >= 16, got {self.grid_shape}")
        if self.n_vessels < 0 or self.n_lesions < 0:
            raise ValueError("vessel and lesion counts must be non-negative")
        lo, hi = self.radius_range
        if lo < 1 or hi < lo:
            raise ValueError(f"radius_range must satisfy 1 <= min <= max, got {self.radius_range}")
        lo, hi = self.lesion_radius_range
        if lo <= 0 or hi < lo:
            raise ValueError(f"invalid lesion_radius_range {self.lesion_radius_range}")
        for name in ("vessel_intensity_range", "lesion_intensity_range", "parenchyma_intensity_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be a non-negative, non-empty interval")
        if self.tortuosity < 0:
            raise ValueError("tortuosity must be >= 0")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PhantomSpec fields: {sorted(unknown)}")
        return cls(**d)

    def spec_hash(self) -> str:
        """Hash of the geometry/intensity parameters, excluding the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class VolumeSample:
    image: np.ndarray
    labels: np.ndarray
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.shape != self.labels.shape:
            raise ValueError(f"image shape {self.image.shape} != labels shape {self.labels.shape}")
        if self.image.ndim != 3:
            raise ValueError(f"expected 3D volumes, got {self.image.ndim}D")

    def copy(self, **changes) -> "VolumeSample":
        out = replace(self, meta=dict(self.meta))
        for k, v in changes.items():
            setattr(out, k, v)
        return out


def _smooth_path(rng: np.random.Generator, shape: np.ndarray, tortuosity: float, start=None, length=None):
    """Dense points along a smooth random curve crossing the volume."""
    if start is None:
        # enter through a random face so trees span the field of view
        axis = rng.integers(3)
        start = rng.uniform(0, shape - 1)
        start[axis] = 0 if rng.random() < 0.5 else shape[axis] - 1
        target = rng.uniform(0.1, 0.9, 3) * (shape - 1)
        target[axis] = shape[axis] - 1 - start[axis]
    else:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        target = start + direction * length
    n_ctrl = 6
    t = np.linspace(0.0, 1.0, n_ctrl)
    line = start[None] + t[:, None] * (target - start)[None]
    span = np.linalg.norm(target - start)
    wiggle = rng.normal(scale=tortuosity * span / n_ctrl, size=line.shape)
    wiggle[0] = 0.0
    ctrl = line + wiggle
    spline = CubicSpline(t, ctrl, axis=0)
    n = max(8, int(span * 4))
    return spline(np.linspace(0.0, 1.0, n))


def _paint_tube(mask: np.ndarray, points: np.ndarray, radii: np.ndarray) -> None:
    shape = np.array(mask.shape)
    for p, r in zip(points, radii):
        lo = np.maximum(np.floor(p - r).astype(int), 0)
        hi = np.minimum(np.ceil(p + r).astype(int) + 1, shape)
        if np.any(hi <= lo):
            continue
        grids = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        d2 = sum((g - c) ** 2 for g, c in zip(grids, p))
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= d2 <= r * r


def _vessel_tree(rng, spec: PhantomSpec, mask: np.ndarray) -> None:
    shape = np.array(spec.grid_shape, dtype=float)
    r_lo, r_hi = spec.radius_range
    trunk = _smooth_path(rng, shape, spec.tortuosity)
    # taper from a random root calibre down to the finest calibre
    r0 = rng.uniform(r_lo, r_hi)
    radii = np.linspace(r0, r_lo, len(trunk))
    _paint_tube(mask, trunk, radii)
    for _ in range(rng.integers(0, 3)):
        k = rng.integers(len(trunk) // 5, max(len(trunk) // 5 + 1, 4 * len(trunk) // 5))
        length = rng.uniform(0.25, 0.5) * shape.min()
        branch = _smooth_path(rng, shape, spec.tortuosity, start=trunk[k], length=length)
        rb = np.full(len(branch), r_lo)
        _paint_tube(mask, branch, rb)


def _lesion(rng, spec: PhantomSpec, mask: np.ndarray) -> None:
    shape = np.array(spec.grid_shape, dtype=float)
    lo, hi = spec.lesion_radius_range
    semi = rng.uniform(lo, hi, 3)
    centre = rng.uniform(semi, shape - 1 - semi) if np.all(shape - 1 - semi > semi) else shape / 2
    rot, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    grids = np.meshgrid(*(np.arange(n) for n in spec.grid_shape), indexing="ij")
    rel = np.stack([g - c for g, c in zip(grids, centre)], axis=-1) @ rot
    mask |= np.sum((rel / semi) ** 2, axis=-1) <= 1.0


def generate_phantom(spec: PhantomSpec) -> VolumeSample:
    """Rasterise vessel trees and ellipsoidal lesions, then render a blurred,
    textured intensity image. Deterministic in ``spec.seed``."""
    spec.validate()
    if spec.n_vessels == 0 and spec.n_lesions == 0:
        raise ValueError("degenerate phantom: zero vessels and zero lesions")
    rng = np.random.default_rng(spec.seed)
    shape = spec.grid_shape

    vessel = np.zeros(shape, dtype=bool)
    for _ in range(spec.n_vessels):
        _vessel_tree(rng, spec, vessel)
    lesion = np.zeros(shape, dtype=bool)
    for _ in range(spec.n_lesions):
        _lesion(rng, spec, lesion)

    labels = np.zeros(shape, dtype=np.uint8)
    labels[lesion] = 2
    labels[vessel] = 1  # vessels crossing a lesion stay vessel

    p_lo, p_hi = spec.parenchyma_intensity_range
    texture = ndimage.gaussian_filter(rng.normal(size=shape), sigma=3.0)
    texture = (texture - texture.min()) / max(np.ptp(texture), 1e-12)
    image = p_lo + (p_hi - p_lo) * texture
    v_lo, v_hi = spec.vessel_intensity_range
    image[vessel] = rng.uniform(v_lo, v_hi)
    l_lo, l_hi = spec.lesion_intensity_range
    lesion_only = labels == 2
    image[lesion_only] = rng.uniform(l_lo, l_hi) + 0.25 * (l_hi - l_lo) * (texture[lesion_only] - 0.5)
    if spec.blur_sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=spec.blur_sigma)
    image = image + rng.normal(scale=2.0, size=shape)
    image = np.clip(image, 0.0, None).astype(np.float32)

    meta = {"spec_hash": spec.spec_hash(), "seed": int(spec.seed), "spec": spec.to_dict(),
            "preprocessing": []}
    return VolumeSample(image, labels, meta)


def normalize_intensity(image: np.ndarray) -> np.ndarray:
    """Per-volume min-max map onto [0, 255]; a constant volume maps to zeros."""
    image = np.asarray(image)
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    lo, hi = image.min(), image.max()
    if hi == lo:
        return np.zeros_like(image, dtype=np.float32)
    out = (image.astype(np.float64) - lo) * (255.0 / (hi - lo))
    out = np.clip(out, 0.0, 255.0).astype(np.float32)
    # pin the extremes exactly despite rounding
    out[image == lo] = 0.0
    out[image == hi] = 255.0
    return out


def normalize_sample(sample: VolumeSample) -> VolumeSample:
    out = sample.copy(image=normalize_intensity(sample.image))
    out.meta["preprocessing"] = list(sample.meta.get("preprocessing", [])) + ["normalize_per_volume_0_255"]
    return out


def to_model_range(image: np.ndarray) -> np.ndarray:
    """[0, 255] -> [0, 1], the scale the network and noise augmentation work in."""
    return (np.asarray(image, dtype=np.float32) / 255.0).astype(np.float32)


def _crop_pad_axis(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = arr.shape[axis]
    if n > target:
        start = (n - target) // 2
        return np.take(arr, np.arange(start, start + target), axis=axis)
    if n < target:
        before = (target - n) // 2
        pad = [(0, 0)] * arr.ndim
        pad[axis] = (before, target - n - before)
        return np.pad(arr, pad, mode="constant", constant_values=0)
    return arr


def resize_crop_pad(sample: VolumeSample, target: Sequence[int] = (192, 192, 128)) -> VolumeSample:
    """Centre-crop oversized axes and zero-pad undersized ones to ``target``."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target must be three positive sizes, got {target}")
    image, labels = sample.image, sample.labels
    for axis, t in enumerate(target):
        image = _crop_pad_axis(image, axis, t)
        labels = _crop_pad_axis(labels, axis, t)
    out = sample.copy(image=image, labels=labels)
    out.meta["preprocessing"] = list(sample.meta.get("preprocessing", [])) + [f"crop_pad_{'x'.join(map(str, target))}"]
    return out


def augment_flip(sample: VolumeSample, p: float = 0.30, rng: Optional[np.random.Generator] = None,
                 force: bool = False) -> VolumeSample:
    """Reverse the H axis of image and labels jointly with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("flip probability must lie in [0, 1]")
    rng = rng if rng is not None else np.random.default_rng()
    if not force and not rng.random() < p:
        return sample
    return sample.copy(image=np.ascontiguousarray(sample.image[:, ::-1, :]),
                       labels=np.ascontiguousarray(sample.labels[:, ::-1, :]))


def augment_background_noise(sample: VolumeSample, std: float = 0.01,
                             rng: Optional[np.random.Generator] = None) -> VolumeSample:
    """Add N(0, std) noise to label-0 voxels only; expects a [0, 1] image."""
    if std < 0:
        raise ValueError("noise std must be >= 0")
    if std == 0:
        return sample
    rng = rng if rng is not None else np.random.default_rng()
    background = sample.labels == 0
    image = sample.image.copy()
    image[background] = image[background] + rng.normal(0.0, std, size=int(background.sum())).astype(image.dtype)
    return sample.copy(image=image)


def split_counts(n: int, ratio: Sequence[float] = DEFAULT_SPLIT) -> Tuple[int, int, int]:
    """Largest-remainder apportionment of ``n`` samples over (train, val, test)."""
    if n < 1:
        raise ValueError("need at least one sample")
    ratio = np.asarray(ratio, dtype=float)
    if ratio.shape != (3,) or np.any(ratio < 0) or ratio.sum() <= 0:
        raise ValueError(f"invalid split ratio {ratio.tolist()}")
    exact = n * ratio / ratio.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return tuple(int(c) for c in counts)


@dataclass
class DatasetManifest:
    entries: List[Tuple[str, str]]
    class_fractions: Optional[List[float]] = None

    def __post_init__(self):
        self.entries = [(str(p), str(s)) for p, s in self.entries]
        bad = {s for _, s in self.entries} - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        paths = [p for p, _ in self.entries]
        if len(set(paths)) != len(paths):
            raise ValueError("a sample may appear in only one split")
        if self.class_fractions is not None and abs(sum(self.class_fractions) - 1.0) > 1e-9:
            raise ValueError("class_fractions must sum to 1")

    def paths(self, split: str) -> List[str]:
        return [p for p, s in self.entries if s == split]

    def to_dict(self) -> dict:
        return {"entries": [{"path": p, "split": s} for p, s in self.entries],
                "class_fractions": self.class_fractions, "label_codes": {str(k): v for k, v in LABEL_CODES.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls([(e["path"], e["split"]) for e in d["entries"]], d.get("class_fractions"))


def class_fractions_from_labels(label_volumes, num_classes: int = NUM_CLASSES) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for labels in label_volumes:
        counts += np.bincount(np.asarray(labels).ravel(), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise ValueError("no voxels to count")
    return counts / total


def compute_class_fractions(manifest: DatasetManifest, root=None, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """Voxel fractions of each class over the train split."""
    from .volume_io import load_volume, resolve

    paths = manifest.paths("train")
    if not paths:
        raise ValueError("manifest has an empty train split")
    return class_fractions_from_labels((load_volume(resolve(p, root)).labels for p in paths), num_classes)
