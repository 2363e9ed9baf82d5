"""Segmentation metrics: overlap ratios from confusion counts and boundary HD95.

Empty-class conventions (they move averages, so they are fixed here):

* DSC / IoU are 1.0 when prediction and ground truth are both empty for a
  class, 0.0 when exactly one of them is.
* Specificity / sensitivity with an empty denominator are 1.0.
* HD95 is not applicable (``None``) when the ground truth has no pixels of the
  class; when the ground truth has pixels but the prediction has none, it is
  the image diagonal in physical units.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

METRIC_COLUMNS = ("mIoU", "DSC", "Acc", "Spe", "Sen", "HD95")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    return pred, gt


def confusion_counts(pred, gt, cls: int) -> ConfusionCounts:
    """One-vs-rest counts for label ``cls``."""
    pred, gt = _check_pair(pred, gt)
    p = pred == cls
    g = gt == cls
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, int(p.size) - tp - fp - fn, fn)


def dsc(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2 * c.tp / denom


def iou(c: ConfusionCounts) -> float:
    denom = c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else c.tp / denom


miou = iou


def acc_spe_sen(c: ConfusionCounts) -> tuple[float, float, float]:
    acc = (c.tp + c.tn) / c.total if c.total else 1.0
    spe = c.tn / (c.tn + c.fp) if c.tn + c.fp else 1.0
    sen = c.tp / (c.tp + c.fn) if c.tp + c.fn else 1.0
    return acc, spe, sen


def boundary_extract(mask, cls: int) -> np.ndarray:
    """Pixels of ``cls`` with a 4-neighbour outside the class (border counts as outside).

    Returns an (N, 2) array of (row, col) indices in row-major order.
    """
    fg = np.asarray(mask) == cls
    if fg.ndim != 2:
        raise ValueError(f"boundary_extract expects a 2D mask, got shape {fg.shape}")
    padded = np.pad(fg, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return np.argwhere(fg & ~interior)


def _boundary_image(points: np.ndarray, shape) -> np.ndarray:
    img = np.zeros(shape, dtype=bool)
    if len(points):
        img[points[:, 0], points[:, 1]] = True
    return img


def hd95(pred, gt, cls: int, spacing: Sequence[float] = (1.0, 1.0)) -> float | None:
    """95th percentile of pooled boundary-to-boundary distances, in spacing units.

    Distances from every predicted boundary pixel to the nearest true boundary
    pixel and vice versa are pooled, and the percentile taken with linear
    interpolation between order statistics.
    """
    pred, gt = _check_pair(pred, gt)
    bg = boundary_extract(gt, cls)
    if len(bg) == 0:
        return None
    bp = boundary_extract(pred, cls)
    if len(bp) == 0:
        return float(math.hypot(gt.shape[0] * spacing[0], gt.shape[1] * spacing[1]))
    # distance maps to the nearest boundary pixel of the other mask
    to_gt = ndimage.distance_transform_edt(~_boundary_image(bg, gt.shape), sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~_boundary_image(bp, gt.shape), sampling=spacing)
    dists = np.concatenate([to_gt[bp[:, 0], bp[:, 1]], to_pred[bg[:, 0], bg[:, 1]]])
    return float(np.percentile(dists, 95, method="linear"))


def foreground_classes(gts: Iterable[np.ndarray], num_classes: int) -> list[int]:
    present = set()
    for g in gts:
        present.update(int(v) for v in np.unique(g))
    return [k for k in range(1, num_classes) if k in present]


def evaluate_masks(preds, gts, num_classes: int, spacing=(1.0, 1.0)) -> dict:
    """Full metric report for paired (B, H, W) label arrays.

    Overlap metrics use confusion counts pooled over all images; HD95 is
    computed per image and class and averaged over the applicable pairs.
    Means run over foreground classes present in the ground truth.
    """
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    _check_pair(preds, gts)
    if preds.ndim == 2:
        preds, gts = preds[None], gts[None]
    if num_classes < 2:
        raise ValueError("num_classes counts the background and must be >= 2")
    if gts.max(initial=0) >= num_classes or preds.max(initial=0) >= num_classes:
        raise ValueError(f"labels exceed num_classes={num_classes}")
    classes = foreground_classes(gts, num_classes)
    per_class = {}
    for k in classes:
        counts = confusion_counts(preds, gts, k)
        acc, spe, sen = acc_spe_sen(counts)
        hds = [hd95(p, g, k, spacing) for p, g in zip(preds, gts)]
        hds = [h for h in hds if h is not None]
        per_class[k] = {
            "mIoU": iou(counts),
            "DSC": dsc(counts),
            "Acc": acc,
            "Spe": spe,
            "Sen": sen,
            "HD95": float(np.mean(hds)) if hds else None,
        }
    mean = {}
    for col in METRIC_COLUMNS:
        vals = [row[col] for row in per_class.values() if row[col] is not None]
        mean[col] = float(np.mean(vals)) if vals else None
    return {"classes": classes, "per_class": per_class, "mean": mean}


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.6f}"


def write_report(report: dict, path_stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.tsv`` (one row per class plus ``mean``) and ``<stem>.json``.

    JSON schema: {"classes": [int], "per_class": {"<k>": {metric: float|null}},
    "mean": {metric: float|null}} with metric names from METRIC_COLUMNS.
    """
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tsv = stem.with_suffix(".tsv")
    with open(tsv, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(("class",) + METRIC_COLUMNS)
        for k, row in report["per_class"].items():
            writer.writerow([k] + [_fmt(row[c]) for c in METRIC_COLUMNS])
        writer.writerow(["mean"] + [_fmt(report["mean"][c]) for c in METRIC_COLUMNS])
    js = stem.with_suffix(".json")
    payload = {
        "classes": report["classes"],
        "per_class": {str(k): v for k, v in report["per_class"].items()},
        "mean": report["mean"],
    }
    js.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return tsv, js
