"""Training loop, early stopping, checkpoints and sliding-window inference."""
from __future__ import annotations

import copy
import csv
import io
import logging
import pickle
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .losses import LossConfig, PredictionPair, hybrid_loss, one_hot
from .metrics import ConfusionCounts, MetricsReport, aggregate, confusion_counts, metrics_from_counts, volume_metrics
from .network import ModelConfig, NeuroVascUNet, build_model, check_divisible, count_parameters
from .phantom import LABEL_CODES, VolumeSample, augment_background_noise, augment_flip, normalize_sample, \
    resize_crop_pad, to_model_range

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class SlidingWindowSpec:
    roi: Tuple[int, int, int] = (96, 96, 64)
    overlap: float = 0.5
    blend: str = "gaussian"
    batch_size: int = 1

    def __post_init__(self):
        self.roi = tuple(int(r) for r in self.roi)
        if len(self.roi) != 3:
            raise ValueError("roi needs three entries")
        check_divisible(self.roi)
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError("overlap must lie in [0, 1)")
        if self.blend not in ("gaussian", "constant"):
            raise ValueError(f"unknown blend mode {self.blend!r}")

    def to_dict(self) -> dict:
        return {"roi": list(self.roi), "overlap": self.overlap, "blend": self.blend, "batch_size": self.batch_size}

    @classmethod
    def from_dict(cls, d: dict) -> "SlidingWindowSpec":
        return cls(**d)


@dataclass
class TrainConfig:
    learning_rate: float = 8e-5
    batch_size: int = 2
    max_epochs: int = 300
    early_stop_patience: int = 15
    seed: int = 0
    betas: Tuple[float, float] = (0.9, 0.999)
    loss: LossConfig = field(default_factory=LossConfig)
    val_every: int = 1
    flip_p: float = 0.30
    noise_std: float = 0.01
    # optional early exit once the validation vessel DSC reaches this value
    target_val_dsc: Optional[float] = None

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        self.betas = tuple(float(b) for b in self.betas)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.val_every < 1:
            raise ValueError("val_every must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingHistory:
    epoch: List[int] = field(default_factory=list)
    train_loss: List[float] = field(default_factory=list)
    train_dsc: List[float] = field(default_factory=list)
    val_loss: List[Optional[float]] = field(default_factory=list)
    val_dsc: List[Optional[float]] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None

    COLUMNS = ("epoch", "train_loss", "train_dsc", "val_loss", "val_dsc", "seconds")

    def __len__(self):
        return len(self.epoch)

    def append(self, **row):
        for k in self.COLUMNS:
            getattr(self, k).append(row[k])

    @property
    def wall_seconds(self) -> float:
        return float(sum(self.seconds))

    def best_val_loss(self) -> Optional[float]:
        vals = [v for v in self.val_loss if v is not None]
        return min(vals) if vals else None

    def to_dict(self) -> dict:
        d = {k: list(getattr(self, k)) for k in self.COLUMNS}
        d["best_epoch"] = self.best_epoch
        d["wall_seconds"] = self.wall_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingHistory":
        h = cls(**{k: list(d[k]) for k in cls.COLUMNS})
        h.best_epoch = d.get("best_epoch")
        return h

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(self.COLUMNS)
        for row in zip(*(getattr(self, k) for k in self.COLUMNS)):
            w.writerow(["" if v is None else v for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingHistory":
        h = cls()
        for row in csv.DictReader(io.StringIO(text)):
            h.append(
                epoch=int(row["epoch"]), train_loss=float(row["train_loss"]), train_dsc=float(row["train_dsc"]),
                val_loss=float(row["val_loss"]) if row["val_loss"] else None,
                val_dsc=float(row["val_dsc"]) if row["val_dsc"] else None, seconds=float(row["seconds"]),
            )
        vals = [(v, e) for v, e in zip(h.val_loss, h.epoch) if v is not None]
        h.best_epoch = min(vals)[1] if vals else None
        return h


class TrainingDiverged(FloatingPointError):
    pass


class CheckpointError(RuntimeError):
    pass


# --------------------------------------------------------------------------- data

def prepare_sample(sample: VolumeSample, target_shape: Optional[Sequence[int]] = None) -> VolumeSample:
    """Per-volume [0, 255] normalisation, optional crop/pad, then [0, 1] model range."""
    out = normalize_sample(sample)
    if target_shape is not None:
        out = resize_crop_pad(out, target_shape)
    out = out.copy(image=to_model_range(out.image))
    out.meta["preprocessing"] = out.meta["preprocessing"] + ["scale_0_1"]
    return out


def _random_patch(sample: VolumeSample, patch: Sequence[int], rng: np.random.Generator):
    starts = [int(rng.integers(0, n - p + 1)) for n, p in zip(sample.image.shape, patch)]
    sl = tuple(slice(s, s + p) for s, p in zip(starts, patch))
    return sample.image[sl], sample.labels[sl]


def _batches(samples: List[VolumeSample], cfg: TrainConfig, patch, rng: np.random.Generator):
    order = rng.permutation(len(samples))
    for i in range(0, len(order), cfg.batch_size):
        images, labels = [], []
        for j in order[i:i + cfg.batch_size]:
            s = augment_flip(samples[j], cfg.flip_p, rng)
            s = augment_background_noise(s, cfg.noise_std, rng)
            img, lab = _random_patch(s, patch, rng)
            images.append(img)
            labels.append(lab)
        x = torch.from_numpy(np.stack(images)[:, None].astype(np.float32))
        y = torch.from_numpy(np.stack(labels).astype(np.int64))
        yield x, y


# --------------------------------------------------------------------------- inference

def _blend_weights(roi, mode: str) -> torch.Tensor:
    if mode == "constant":
        return torch.ones(roi, dtype=torch.float64)
    axes = []
    for n in roi:
        c = (n - 1) / 2.0
        sigma = max(n * 0.125, 1e-3)
        g = torch.exp(-0.5 * ((torch.arange(n, dtype=torch.float64) - c) / sigma) ** 2)
        axes.append(g / g.max())
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return w.clamp_min(1e-3)


def _tile_starts(length: int, roi: int, stride: int) -> List[int]:
    n = int(np.ceil(max(length - roi, 0) / stride)) + 1
    return [i * stride for i in range(n)]


@torch.no_grad()
def sliding_window_infer(model: torch.nn.Module, volume, spec: Optional[SlidingWindowSpec] = None) -> torch.Tensor:
    """Blend softmax probabilities of overlapping windows into a (C, D, H, W) volume.

    ``volume`` is (D, H, W) or (C_in, D, H, W), already in model range. Edges
    that the stride does not reach are covered by reflective padding.
    """
    spec = spec or SlidingWindowSpec()
    vol = torch.as_tensor(np.asarray(volume) if not torch.is_tensor(volume) else volume)
    if vol.dim() == 3:
        vol = vol[None]
    vol = vol.to(torch.get_default_dtype() if not vol.is_floating_point() else vol.dtype)
    spatial = tuple(vol.shape[1:])
    roi = spec.roi
    for axis, n, r in zip("DHW", spatial, roi):
        if r > n:
            raise ValueError(f"window size {r} exceeds volume size {n} along axis {axis}")
    strides = [max(1, int(r * (1.0 - spec.overlap))) for r in roi]
    starts = [_tile_starts(n, r, s) for n, r, s in zip(spatial, roi, strides)]
    padded = [st[-1] + r for st, r in zip(starts, roi)]
    pad = [p - n for p, n in zip(padded, spatial)]
    if any(pad):
        flat = []
        for p in reversed(pad):
            flat += [0, p]
        vol = torch.nn.functional.pad(vol[None], flat, mode="reflect")[0]

    was_training = model.training
    model.eval()
    try:
        weight = _blend_weights(roi, spec.blend).to(vol.dtype)
        acc = None
        norm = torch.zeros(padded, dtype=vol.dtype)
        corners = [(a, b, c) for a in starts[0] for b in starts[1] for c in starts[2]]
        for i in range(0, len(corners), spec.batch_size):
            chunk = corners[i:i + spec.batch_size]
            tiles = torch.stack([vol[:, a:a + roi[0], b:b + roi[1], c:c + roi[2]] for a, b, c in chunk])
            probs = model(tiles).softmax(dim=1).to(vol.dtype)
            if acc is None:
                acc = torch.zeros((probs.shape[1],) + tuple(padded), dtype=vol.dtype)
            for (a, b, c), p in zip(chunk, probs):
                acc[:, a:a + roi[0], b:b + roi[1], c:c + roi[2]] += p * weight
                norm[a:a + roi[0], b:b + roi[1], c:c + roi[2]] += weight
    finally:
        model.train(was_training)
    out = acc / norm
    return out[:, : spatial[0], : spatial[1], : spatial[2]]


def evaluate(model, dataset: Sequence[VolumeSample], spec: Optional[SlidingWindowSpec] = None,
             classes: Optional[Dict[int, str]] = None, save_dir=None) -> MetricsReport:
    """Sliding-window predictions, argmax masks, per-volume metrics, mean aggregate.

    Parameters are left untouched; the model's train/eval flag is restored.
    With ``save_dir`` the predicted masks are written as ``<i>_pred.npy``.
    """
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    spec = spec or SlidingWindowSpec()
    classes = classes or {k: v for k, v in LABEL_CODES.items() if k > 0}
    per_volume, names = [], []
    seconds = 0.0
    for i, sample in enumerate(dataset):
        t0 = time.perf_counter()
        probs = sliding_window_infer(model, sample.image, spec)
        pred = probs.argmax(dim=0).numpy().astype(np.uint8)
        seconds += time.perf_counter() - t0
        per_volume.append(volume_metrics(pred, sample.labels, classes))
        names.append(str(sample.meta.get("name", i)))
        if save_dir is not None:
            Path(save_dir).mkdir(parents=True, exist_ok=True)
            np.save(Path(save_dir) / f"{i}_pred.npy", pred)
    params = count_parameters(model) if isinstance(model, torch.nn.Module) else None
    return MetricsReport(aggregate(per_volume), per_volume, params, seconds, names)


# --------------------------------------------------------------------------- training

def _validate(model, val_set, cfg: TrainConfig, spec: SlidingWindowSpec) -> Tuple[float, float]:
    losses, counts = [], np.zeros(3, dtype=np.int64)
    for sample in val_set:
        probs = sliding_window_infer(model, sample.image, spec)
        labels = torch.from_numpy(sample.labels.astype(np.int64))[None]
        target = one_hot(labels, probs.shape[0]).to(probs.dtype)
        losses.append(float(hybrid_loss(PredictionPair(probs[None], target), cfg.loss)))
        c = confusion_counts(probs.argmax(dim=0).numpy(), sample.labels, 1)
        counts += (c.tp, c.fp, c.fn)
    tp, fp, fn = counts
    dsc = metrics_from_counts(ConfusionCounts(int(tp), int(fp), int(fn), 0))["DSC"]
    return float(np.mean(losses)), float(dsc)


def _rng_state(np_rng: np.random.Generator) -> dict:
    return {"torch": torch.get_rng_state(), "numpy": np_rng.bit_generator.state}


def train(model: NeuroVascUNet, train_set: Sequence[VolumeSample], val_set: Sequence[VolumeSample],
          cfg: TrainConfig, sw_spec: Optional[SlidingWindowSpec] = None, resume: Optional[dict] = None,
          on_epoch: Optional[Callable[[int, TrainingHistory], None]] = None):
    """Adam with early stopping on validation loss.

    Returns ``(checkpoint, history)``; the checkpoint carries the parameters of
    the best validation epoch for inference and the latest state for resuming.
    Samples must already be prepared (see :func:`prepare_sample`).
    """
    if not train_set:
        raise ValueError("training set is empty")
    if not val_set:
        raise ValueError("validation set is empty")
    if len(cfg.loss.class_weights) != model.cfg.num_classes:
        raise ValueError(
            f"loss has {len(cfg.loss.class_weights)} class weights, model predicts {model.cfg.num_classes} classes"
        )
    patch = model.cfg.patch_shape
    for s in list(train_set) + list(val_set):
        if any(n < p for n, p in zip(s.image.shape, patch)):
            raise ValueError(f"volume {s.image.shape} smaller than training patch {patch}")
    sw_spec = sw_spec or SlidingWindowSpec(roi=patch)

    torch.manual_seed(cfg.seed)
    np_rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    history = TrainingHistory()
    best_state = copy.deepcopy(model.state_dict())
    best_loss = float("inf")
    stale = 0
    start_epoch = 0
    if resume is not None:
        model.load_state_dict(resume["last_state_dict"])
        optimizer.load_state_dict(resume["optimizer"])
        history = TrainingHistory.from_dict(resume["history"])
        best_state = copy.deepcopy(resume["state_dict"])
        best_loss = history.best_val_loss() if history.best_val_loss() is not None else float("inf")
        stale = resume.get("stale", 0)
        start_epoch = resume["epoch"]
        torch.set_rng_state(resume["rng"]["torch"])
        np_rng.bit_generator.state = resume["rng"]["numpy"]

    epoch = start_epoch
    for epoch in range(start_epoch + 1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        losses, counts = [], np.zeros(3, dtype=np.int64)
        for b, (x, y) in enumerate(_batches(list(train_set), cfg, patch, np_rng)):
            logits = model(x)
            loss = hybrid_loss(PredictionPair.from_logits(logits, y), cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}, batch {b}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            c = confusion_counts(logits.detach().argmax(dim=1).numpy(), y.numpy(), 1)
            counts += (c.tp, c.fp, c.fn)
        tp, fp, fn = (int(v) for v in counts)
        train_dsc = metrics_from_counts(ConfusionCounts(tp, fp, fn, 0))["DSC"]

        val_loss = val_dsc = None
        if epoch % cfg.val_every == 0:
            val_loss, val_dsc = _validate(model, val_set, cfg, sw_spec)
            if val_loss < best_loss:
                best_loss, stale = val_loss, 0
                best_state = copy.deepcopy(model.state_dict())
                history.best_epoch = epoch
            else:
                stale += 1
        history.append(epoch=epoch, train_loss=float(np.mean(losses)), train_dsc=float(train_dsc),
                       val_loss=val_loss, val_dsc=val_dsc, seconds=time.perf_counter() - t0)
        log.info("epoch %d train_loss %.4f train_dsc %.4f val_loss %s val_dsc %s", epoch,
                 history.train_loss[-1], train_dsc, val_loss, val_dsc)
        if on_epoch is not None:
            on_epoch(epoch, history)
        if stale >= cfg.early_stop_patience:
            log.info("early stop at epoch %d (best epoch %s)", epoch, history.best_epoch)
            break
        if cfg.target_val_dsc is not None and val_dsc is not None and val_dsc >= cfg.target_val_dsc:
            log.info("target validation DSC reached at epoch %d", epoch)
            break

    checkpoint = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        "train_config": cfg.to_dict(),
        "state_dict": best_state,
        "last_state_dict": copy.deepcopy(model.state_dict()),
        "optimizer": copy.deepcopy(optimizer.state_dict()),
        "history": history.to_dict(),
        "epoch": epoch,
        "stale": stale,
        "rng": _rng_state(np_rng),
    }
    model.load_state_dict(best_state)
    return checkpoint, history


# --------------------------------------------------------------------------- checkpoints

def make_checkpoint(model: NeuroVascUNet, history: Optional[TrainingHistory] = None, epoch: int = 0) -> dict:
    """Checkpoint of the current parameters (no optimizer state)."""
    state = copy.deepcopy(model.state_dict())
    return {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        "state_dict": state,
        "history": (history or TrainingHistory()).to_dict(),
        "epoch": epoch,
    }


def save_checkpoint(checkpoint: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint, path)
    return path


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None):
    """Load an archive and rebuild its model.

    Returns ``(model, checkpoint_dict)``; the model holds the best parameters
    and is in eval mode.
    """
    try:
        ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (zipfile.BadZipFile, pickle.UnpicklingError, RuntimeError, EOFError, OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt or unreadable checkpoint ({exc})") from exc
    if not isinstance(ckpt, dict) or "format_version" not in ckpt:
        raise CheckpointError(f"{path}: not a checkpoint archive")
    if ckpt["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {ckpt['format_version']} != supported {CHECKPOINT_VERSION}")
    cfg = ModelConfig.from_dict(ckpt["model_config"])
    if cfg.config_hash() != ckpt["config_hash"]:
        raise CheckpointError(f"{path}: stored model config does not match its recorded hash")
    if expected_config is not None and expected_config.config_hash() != ckpt["config_hash"]:
        raise CheckpointError(f"{path}: model config hash {ckpt['config_hash'][:12]} does not match the expected "
                              f"config {expected_config.config_hash()[:12]}")
    model = build_model(cfg)
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt
