"""Volume persistence.

Two on-disk layouts are supported:

* a phantom container: a directory holding ``image.npy`` (float32),
  ``labels.npy`` (uint8) and a ``meta.json`` sidecar describing both arrays;
* NIfTI-1: ``<stem>_image.nii.gz`` and ``<stem>_labels.nii.gz`` next to a
  ``<stem>.json`` sidecar, addressed by the path ``<stem>.nii.gz``.
"""
from __future__ import annotations

import json
from pathlib import Path

import nibabel as nib
import numpy as np

from .phantom import LABEL_CODES, DatasetManifest, VolumeSample

CONTAINER_VERSION = 1
NIFTI_SUFFIX = ".nii.gz"


class VolumeFormatError(ValueError):
    """Raised for malformed or inconsistent volume files."""


def resolve(path, root=None) -> Path:
    p = Path(path)
    if root is not None and not p.is_absolute():
        p = Path(root) / p
    return p


def _sidecar(sample: VolumeSample) -> dict:
    return {
        "format_version": CONTAINER_VERSION,
        "shape": list(sample.image.shape),
        "arrays": {"image": "float32", "labels": "uint8"},
        "label_codes": {str(k): v for k, v in LABEL_CODES.items()},
        "seed": sample.meta.get("seed"),
        "spec_hash": sample.meta.get("spec_hash"),
        "meta": sample.meta,
    }


def _checked(image: np.ndarray, labels: np.ndarray, meta: dict, where) -> VolumeSample:
    if image.shape != labels.shape:
        raise VolumeFormatError(f"{where}: image shape {image.shape} != labels shape {labels.shape}")
    expected = meta.get("shape")
    if expected is not None and tuple(expected) != image.shape:
        raise VolumeFormatError(f"{where}: sidecar shape {tuple(expected)} != array shape {image.shape}")
    return VolumeSample(image, labels, dict(meta.get("meta", {})))


def _labels_u8(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise VolumeFormatError("label codes do not fit in uint8")
    return labels.astype(np.uint8)


def save_volume(sample: VolumeSample, path) -> Path:
    path = Path(path)
    if path.name.endswith(NIFTI_SUFFIX):
        return save_nifti(sample, path)
    path.mkdir(parents=True, exist_ok=True)
    np.save(path / "image.npy", np.asarray(sample.image, dtype=np.float32))
    np.save(path / "labels.npy", _labels_u8(sample.labels))
    (path / "meta.json").write_text(json.dumps(_sidecar(sample), indent=2))
    return path


def load_volume(path) -> VolumeSample:
    path = Path(path)
    if path.name.endswith(NIFTI_SUFFIX):
        return load_nifti(path)
    if not path.is_dir():
        raise VolumeFormatError(f"{path}: not a volume container directory")
    for name in ("image.npy", "labels.npy", "meta.json"):
        if not (path / name).exists():
            raise VolumeFormatError(f"{path}: missing {name}")
    try:
        meta = json.loads((path / "meta.json").read_text())
        image = np.load(path / "image.npy", allow_pickle=False)
        labels = np.load(path / "labels.npy", allow_pickle=False)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"{path}: unreadable container ({exc})") from exc
    if image.dtype != np.float32 or labels.dtype != np.uint8:
        raise VolumeFormatError(f"{path}: expected float32 image and uint8 labels, got {image.dtype}/{labels.dtype}")
    return _checked(image, labels, meta, path)


def _nifti_paths(path: Path):
    stem = path.name[: -len(NIFTI_SUFFIX)]
    return (path.with_name(f"{stem}_image{NIFTI_SUFFIX}"), path.with_name(f"{stem}_labels{NIFTI_SUFFIX}"),
            path.with_name(f"{stem}.json"))


def save_nifti(sample: VolumeSample, path, affine=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img_path, lab_path, side_path = _nifti_paths(path)
    affine = np.eye(4) if affine is None else affine
    nib.save(nib.Nifti1Image(np.asarray(sample.image, dtype=np.float32), affine), img_path)
    nib.save(nib.Nifti1Image(_labels_u8(sample.labels), affine), lab_path)
    side_path.write_text(json.dumps(_sidecar(sample), indent=2))
    return path


def load_nifti(path) -> VolumeSample:
    path = Path(path)
    img_path, lab_path, side_path = _nifti_paths(path)
    if not img_path.exists():
        raise VolumeFormatError(f"{path}: missing image file {img_path.name}")
    if not lab_path.exists():
        raise VolumeFormatError(f"{path}: missing label file {lab_path.name}")
    try:
        image = np.asanyarray(nib.load(img_path).dataobj).astype(np.float32)
        labels = np.asanyarray(nib.load(lab_path).dataobj)
    except Exception as exc:  # nibabel raises a zoo of types for corrupt files
        raise VolumeFormatError(f"{path}: unreadable NIfTI ({exc})") from exc
    if labels.dtype != np.uint8:
        labels = _labels_u8(np.rint(labels))
    meta = json.loads(side_path.read_text()) if side_path.exists() else {}
    return _checked(image, labels, meta, path)


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(manifest.to_dict(), indent=2))
    return path


def load_manifest(path) -> DatasetManifest:
    return DatasetManifest.from_dict(json.loads(Path(path).read_text()))


def write_phantom_dataset(spec, count: int, out_dir, seed: int = 0, split=None) -> DatasetManifest:
    """Generate ``count`` phantoms with seeds ``seed + i`` and write them plus ``manifest.json``.

    Samples are assigned to train/val/test in order using largest-remainder
    apportionment of ``split`` (default 100:10:27).
    """
    from dataclasses import replace

    from .phantom import DEFAULT_SPLIT, SPLITS, class_fractions_from_labels, generate_phantom, split_counts

    if count < 1:
        raise ValueError("count must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out_dir} is not writable ({exc})") from exc
    counts = split_counts(count, split or DEFAULT_SPLIT)
    tags = [tag for tag, n in zip(SPLITS, counts) for _ in range(n)]
    entries, train_labels = [], []
    for i, tag in enumerate(tags):
        sample = generate_phantom(replace(spec, seed=seed + i))
        name = f"phantom_{i:04d}"
        sample.meta["name"] = name
        save_volume(sample, out_dir / "samples" / name)
        entries.append((f"samples/{name}", tag))
        if tag == "train":
            train_labels.append(sample.labels)
    fractions = class_fractions_from_labels(train_labels).tolist() if train_labels else None
    manifest = DatasetManifest(entries, fractions)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
