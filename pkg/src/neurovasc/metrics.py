"""Voxel-level confusion counts and the overlap / detection metric suite."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

METRIC_NAMES = ("DSC", "JI", "Sens", "Spec", "Prec")
# column order of the comparison table
REPORT_COLUMNS = ("DSC", "JI", "Sens", "Spec", "Prec", "Params", "InfTimeSec")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(pred, gt, class_k: int) -> ConfusionCounts:
    """One-vs-rest counts for ``class_k``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    p = pred == class_k
    g = gt == class_k
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, fn, int(p.size) - tp - fp - fn)


def _ratio(num: int, den: int):
    return (num / den, False) if den else (1.0, True)


def metrics_from_counts(c: ConfusionCounts) -> Dict[str, object]:
    """DSC, JI, Sens, Spec, Prec from counts.

    Any 0/0 evaluates to 1.0 and is listed under ``"undefined"``; for DSC and JI
    that is the empty-prediction / empty-truth case.
    """
    values = {}
    undefined = []
    for name, num, den in (
        ("DSC", 2 * c.tp, 2 * c.tp + c.fp + c.fn),
        ("JI", c.tp, c.tp + c.fp + c.fn),
        ("Sens", c.tp, c.tp + c.fn),
        ("Spec", c.tn, c.tn + c.fp),
        ("Prec", c.tp, c.tp + c.fp),
    ):
        v, undef = _ratio(num, den)
        values[name] = v
        if undef:
            undefined.append(name)
    values["undefined"] = undefined
    return values


@dataclass
class MetricsReport:
    """Per-class metrics (mean over volumes) plus per-volume detail."""

    per_class: Dict[str, Dict[str, float]]
    per_volume: List[Dict[str, Dict[str, float]]] = field(default_factory=list)
    params: Optional[int] = None
    inference_seconds: Optional[float] = None
    names: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": self.per_class,
            "per_volume": self.per_volume,
            "volumes": self.names,
            "params": self.params,
            "inference_seconds": self.inference_seconds,
            "columns": list(REPORT_COLUMNS),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def rows(self) -> List[List[object]]:
        out = []
        for cls_name, m in self.per_class.items():
            out.append([cls_name] + [m[k] for k in METRIC_NAMES] + [self.params, self.inference_seconds])
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(("class",) + REPORT_COLUMNS)
        writer.writerows(self.rows())
        return buf.getvalue()


def volume_metrics(pred, gt, classes: Dict[int, str]) -> Dict[str, Dict[str, float]]:
    out = {}
    for k, name in classes.items():
        m = metrics_from_counts(confusion_counts(pred, gt, k))
        out[name] = {key: m[key] for key in METRIC_NAMES}
    return out


def aggregate(per_volume: List[Dict[str, Dict[str, float]]]) -> Dict[str, Dict[str, float]]:
    if not per_volume:
        raise ValueError("nothing to aggregate")
    return {
        cls_name: {k: float(np.mean([v[cls_name][k] for v in per_volume])) for k in METRIC_NAMES}
        for cls_name in per_volume[0]
    }
