"""mIoU, MSE and MAE over fringe-order maps, aggregated over a whole dataset."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


def _stack(maps) -> np.ndarray:
    if isinstance(maps, np.ndarray):
        return maps
    maps = list(maps)
    if not maps:
        raise ValueError("no maps given")
    return np.concatenate([np.asarray(m).reshape(-1) for m in maps])


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = _stack(pred), _stack(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth {g.shape}")
    if p.size == 0:
        raise ValueError("empty input")
    return p.reshape(-1).astype(np.int64), g.reshape(-1).astype(np.int64)


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """(K, K) counts, rows = ground truth, columns = prediction."""
    p, g = _pair(pred, gt)
    for name, v in (("prediction", p), ("ground truth", g)):
        if v.min() < 0 or v.max() >= num_classes:
            raise ValueError(f"{name} values outside [0, {num_classes - 1}]")
    return np.bincount(g * num_classes + p, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def per_class_iou(conf: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both sides."""
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    out = np.full(len(conf), np.nan)
    ok = union > 0
    out[ok] = inter[ok] / union[ok]
    return out


def _mean_present(ious: np.ndarray) -> float:
    vals = [float(v) for v in ious if not math.isnan(v)]
    return sum(vals) / len(vals)     # sequential sum: order fixed by class index


def miou(pred, gt, num_classes: int) -> float:
    """Mean IoU over classes with nonzero union, counts pooled over all maps."""
    return _mean_present(per_class_iou(confusion(pred, gt, num_classes)))


def mse(pred, gt) -> float:
    p, g = _pair(pred, gt)
    d = (p - g).astype(np.float64)
    return float(np.mean(d * d))


def mae(pred, gt) -> float:
    p, g = _pair(pred, gt)
    return float(np.mean(np.abs(p - g).astype(np.float64)))


@dataclass
class EvalReport:
    miou: float
    mse: float
    mae: float
    class_iou: np.ndarray = field(repr=False)
    pixels: int = 0
    samples: int = 0
    model: str = "Hformer"
    space: str = "order"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Model", "mIoU", "MSE", "MAE", "pixels", "samples", "space"])
        w.writerow([self.model, f"{self.miou:.6f}", f"{self.mse:.6f}", f"{self.mae:.6f}",
                    self.pixels, self.samples, self.space])
        w.writerow([])
        w.writerow(["class", "IoU"])
        for c, v in enumerate(self.class_iou):
            w.writerow([c, "" if math.isnan(v) else f"{v:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        head = f"{'Model':<12}{'mIoU':>10}{'MSE':>10}{'MAE':>10}"
        row = f"{self.model:<12}{self.miou:>10.4f}{self.mse:>10.4f}{self.mae:>10.4f}"
        tail = f"({self.samples} samples, {self.pixels} pixels, errors in fringe {self.space} units)"
        return "\n".join([head, row, tail]) + "\n"


def evaluate(pred_maps: Iterable[np.ndarray], gt_maps: Iterable[np.ndarray], num_classes: int,
             space: str = "order", model: str = "Hformer") -> EvalReport:
    """Dataset-level report.  space="phase" scales MSE/MAE to radians (k * 2*pi)."""
    preds = [np.asarray(p) for p in pred_maps]
    gts = [np.asarray(g) for g in gt_maps]
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth counts differ")
    if not preds:
        raise ValueError("empty input")
    conf = confusion(preds, gts, num_classes)
    ious = per_class_iou(conf)
    scale = {"order": 1.0, "phase": 2.0 * math.pi}[space]
    return EvalReport(miou=_mean_present(ious), mse=mse(preds, gts) * scale ** 2,
                      mae=mae(preds, gts) * scale, class_iou=ious, pixels=int(conf.sum()),
                      samples=len(preds), model=model, space=space)
