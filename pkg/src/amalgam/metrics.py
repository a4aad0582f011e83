"""Evaluation metrics for segmentation, depth, and surface normals.

Pure array-level functions; nothing here touches the autodiff tape.
Threshold conventions, where the literature leaves room: depth ratio
deltas use strict less-than, angle "within t" uses <=.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DataError, DimensionError

DELTA_THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)
ANGLE_THRESHOLDS = (11.25, 22.5, 30.0)


@dataclass
class MetricReport:
    """Per-task evaluation results; tasks not evaluated stay None."""
    miou: float = None
    pixel_acc: float = None
    abs_rel: float = None
    sqr_rel: float = None
    delta1: float = None
    delta2: float = None
    delta3: float = None
    angle_mean: float = None
    angle_median: float = None
    within_1125: float = None
    within_225: float = None
    within_30: float = None
    eps_normalized: int = 0

    def validate(self) -> "MetricReport":
        rates = ["miou", "pixel_acc", "delta1", "delta2", "delta3",
                 "within_1125", "within_225", "within_30"]
        for name in rates:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise DataError(f"metric {name}={v} outside [0, 1]")
        for name in ["angle_mean", "angle_median"]:
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 180.0:
                raise DataError(f"metric {name}={v} outside [0, 180]")
        return self

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def text_block(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name}={v:.6f}" if isinstance(v, float) else f"{f.name}={v}")
        return "\n".join(lines)


def _flat_mask(mask, spatial_shape) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    if m.shape != spatial_shape:
        raise DimensionError(f"mask shape {m.shape} does not match maps {spatial_shape}")
    if not m.any():
        raise DataError("metric needs at least one valid pixel")
    return m


def seg_metrics(pred_labels, gt_labels, k: int):
    """(mIoU, pixel accuracy). Classes absent from both gt and prediction
    are left out of the IoU mean."""
    pred = np.asarray(pred_labels).reshape(-1)
    gt = np.asarray(gt_labels).reshape(-1)
    if pred.shape != gt.shape:
        raise DimensionError(f"label maps disagree: {pred.shape} vs {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.min() < 0 or arr.max() >= k:
            raise DataError(f"{name} labels outside [0, {k})")
    confusion = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    inter = np.diag(confusion).astype(np.float64)
    union = confusion.sum(axis=0) + confusion.sum(axis=1) - inter
    present = union > 0
    miou = float((inter[present] / union[present]).mean())
    pixel_acc = float(inter.sum() / confusion.sum())
    return miou, pixel_acc


def depth_metrics(pred, gt, mask):
    """(abs rel, sqr rel, delta<1.25, delta<1.25^2, delta<1.25^3).

    Ratios use strict less-than; a non-positive prediction can never fall
    under any threshold.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise DimensionError(f"depth maps disagree: {p.shape} vs {g.shape}")
    m = _flat_mask(mask, p.shape)
    y, ystar = p[m], g[m]
    if (ystar <= 0).any():
        raise DataError("ground-truth depth must be positive on valid pixels")
    abs_rel = float(np.mean(np.abs(y - ystar) / ystar))
    sqr_rel = float(np.mean((y - ystar) ** 2 / ystar))
    with np.errstate(divide="ignore"):
        ratio = np.where(y > 0, np.maximum(y / ystar, ystar / y), np.inf)
    deltas = tuple(float(np.mean(ratio < t)) for t in DELTA_THRESHOLDS)
    return (abs_rel, sqr_rel) + deltas


def _unit_normals(pred: np.ndarray):
    length = np.sqrt((pred ** 2).sum(axis=1, keepdims=True))
    eps_pixels = length < 1e-12
    unit = pred / np.maximum(length, 1e-12)
    return unit, eps_pixels[:, 0]


def count_eps_normals(pred, mask=None) -> int:
    """Valid pixels whose predicted normal had (near-)zero length."""
    _, eps_pixels = _unit_normals(np.asarray(pred, dtype=np.float64))
    if mask is not None:
        eps_pixels = eps_pixels & np.asarray(mask, dtype=bool)
    return int(eps_pixels.sum())


def normal_metrics(pred, gt, mask):
    """(mean deg, median deg, within 11.25, within 22.5, within 30).

    The angle comes from atan2(|pred x gt|, pred . gt), which is invariant
    to the prediction's length (so no lossy renormalization) and exact at
    0 and 180 degrees. Zero-length predictions count as 90 degrees.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape or p.shape[1] != 3:
        raise DimensionError(f"normal fields disagree: {p.shape} vs {g.shape}")
    m = _flat_mask(mask, (p.shape[0], p.shape[2], p.shape[3]))
    dots = (p * g).sum(axis=1)
    cross = np.cross(p, g, axis=1)
    sines = np.sqrt((cross ** 2).sum(axis=1))
    angles = np.degrees(np.arctan2(sines, dots))
    degenerate = np.sqrt((p ** 2).sum(axis=1)) < 1e-12
    angles = np.where(degenerate, 90.0, angles)[m]
    mean = float(angles.mean())
    median = float(np.median(angles))
    within = tuple(float(np.mean(angles <= t)) for t in ANGLE_THRESHOLDS)
    return (mean, median) + within
