"""Experiment configuration: one JSON file plus environment overrides.

``NEUROVASC_SEED`` overrides ``train.seed``. ``NEUROVASC_OVERRIDES`` holds
``dot.path=value`` assignments separated by ``;``, with JSON-encoded values,
e.g. ``train.learning_rate=1e-3;model.channels=[8,16,32,64,128]``.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from .losses import LossConfig, class_weights_from_fractions
from .network import ModelConfig
from .phantom import PhantomSpec
from .training import SlidingWindowSpec, TrainConfig

SEED_ENV = "NEUROVASC_SEED"
OVERRIDES_ENV = "NEUROVASC_OVERRIDES"


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot set {dotted}: {k} is not a mapping")
    node[keys[-1]] = value


def apply_env_overrides(raw: dict, environ: Optional[Mapping[str, str]] = None) -> dict:
    environ = os.environ if environ is None else environ
    out = copy.deepcopy(raw)
    spec = environ.get(OVERRIDES_ENV, "").strip()
    for item in filter(None, (s.strip() for s in spec.split(";"))):
        if "=" not in item:
            raise ValueError(f"malformed override {item!r}; expected dot.path=value")
        path, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        set_path(out, path.strip(), parsed)
    if environ.get(SEED_ENV):
        set_path(out, "train.seed", int(environ[SEED_ENV]))
    return out


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sliding_window: SlidingWindowSpec = field(default_factory=SlidingWindowSpec)
    manifest: Optional[str] = None
    phantom: Optional[PhantomSpec] = None
    phantom_count: int = 0
    # None keeps volumes at their stored size
    target_shape: Optional[tuple] = None
    # "auto" derives sqrt-ratio weights from the train split
    class_weights: object = "auto"
    output_dir: str = "runs/experiment"
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Optional[Path] = None) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        data = d.get("data", {})
        train = dict(d.get("train", {}))
        loss = dict(train.pop("loss", d.get("loss", {})))
        weights = loss.pop("class_weights", "auto")
        cfg = cls(
            model=ModelConfig.from_dict(d.get("model", {})),
            train=TrainConfig.from_dict({**train, "loss": LossConfig(**loss) if weights == "auto"
                                         else LossConfig(class_weights=weights, **loss)}),
            sliding_window=SlidingWindowSpec.from_dict(d.get("sliding_window", {})),
            manifest=data.get("manifest"),
            phantom=PhantomSpec.from_dict(data["phantom"]) if "phantom" in data else None,
            phantom_count=int(data.get("count", 0)),
            target_shape=tuple(data["target_shape"]) if data.get("target_shape") else None,
            class_weights=weights,
            output_dir=d.get("output_dir", "runs/experiment"),
            raw=d,
        )
        if cfg.manifest is None and cfg.phantom is None:
            raise ValueError("config needs data.manifest or data.phantom")
        if cfg.phantom is not None and cfg.phantom_count < 1:
            raise ValueError("data.count must be >= 1 when generating phantoms")
        if base_dir is not None:
            if cfg.manifest is not None and not Path(cfg.manifest).is_absolute():
                cfg.manifest = str(Path(base_dir) / cfg.manifest)
            if not Path(cfg.output_dir).is_absolute():
                cfg.output_dir = str(Path(base_dir) / cfg.output_dir)
        if len(cfg.train.loss.class_weights) != cfg.model.num_classes and weights != "auto":
            raise ValueError("class_weights length must equal model.num_classes")
        return cfg

    def resolve_weights(self, fractions) -> None:
        if self.class_weights == "auto":
            self.train.loss.class_weights = class_weights_from_fractions(fractions)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()


def load_experiment(path, environ: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    path = Path(path)
    raw = json.loads(path.read_text())
    raw = apply_env_overrides(raw, environ)
    return ExperimentConfig.from_dict(raw, base_dir=path.parent)
