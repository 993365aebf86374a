"""Binary segmentation metrics: Dice, Hausdorff distance, sensitivity, specificity."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .blocks import DimensionError, ParameterError

COLUMNS = ("DSC", "HD", "SEN", "SPC")


@dataclass(frozen=True)
class SegMetrics:
    dsc: float
    hd: float
    sen: float
    spc: float

    def row(self) -> tuple[float, float, float, float]:
        return self.dsc, self.hd, self.sen, self.spc


def _as_masks(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def probs_to_mask(probs) -> np.ndarray:
    """Argmax over the class axis of a ``(..., 2, H, W)`` probability array."""
    probs = np.asarray(probs)
    return probs.argmax(axis=-3).astype(np.uint8)


def confusion(pred, gt) -> tuple[int, int, int, int]:
    """Return ``(TP, FP, FN, TN)`` pixel counts."""
    pred, gt = _as_masks(pred, gt)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    return tp, fp, fn, tn


def dsc(pred, gt) -> float:
    tp, fp, fn, _ = confusion(pred, gt)
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def sen_spc(pred, gt) -> tuple[float, float]:
    tp, fp, fn, tn = confusion(pred, gt)
    sen = 1.0 if tp + fn == 0 else tp / (tp + fn)
    spc = 1.0 if tn + fp == 0 else tn / (tn + fp)
    return sen, spc


def _directed(a: np.ndarray, b: np.ndarray) -> float:
    # distance from every pixel to the nearest foreground pixel of b
    dist = ndimage.distance_transform_edt(~b)
    return float(dist[a].max())


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between the foreground pixel sets, in pixels.

    Both empty gives 0; exactly one empty gives the image diagonal.
    """
    pred, gt = _as_masks(pred, gt)
    has_p, has_g = pred.any(), gt.any()
    if not has_p and not has_g:
        return 0.0
    if has_p != has_g:
        return math.hypot(*pred.shape)
    return max(_directed(pred, gt), _directed(gt, pred))


def evaluate(pred, gt) -> SegMetrics:
    sen, spc = sen_spc(pred, gt)
    return SegMetrics(dsc(pred, gt), hausdorff(pred, gt), sen, spc)


def mean_metrics(per_case: list[SegMetrics]) -> SegMetrics:
    if not per_case:
        raise ParameterError("cannot aggregate an empty list of metrics")
    arr = np.array([m.row() for m in per_case], dtype=np.float64)
    return SegMetrics(*(float(v) for v in arr.mean(axis=0)))


def aggregate(per_fold: dict[str, list[SegMetrics]]) -> tuple[SegMetrics, list[tuple[str, SegMetrics]]]:
    """Per-fold means plus the unweighted mean over every case.

    Returns the overall mean and table rows ``(label, metrics)`` ending with ``"mean"``.
    """
    if not per_fold or not any(per_fold.values()):
        raise ParameterError("cannot aggregate an empty list of metrics")
    rows = [(label, mean_metrics(cases)) for label, cases in per_fold.items()]
    overall = mean_metrics([m for cases in per_fold.values() for m in cases])
    rows.append(("mean", overall))
    return overall, rows


def format_report(rows: list[tuple[str, SegMetrics]]) -> str:
    lines = ["\t".join(("method/fold",) + COLUMNS)]
    for label, m in rows:
        lines.append(f"{label}\t{m.dsc:.4f}\t{m.hd:.2f}\t{m.sen:.4f}\t{m.spc:.4f}")
    return "\n".join(lines) + "\n"


def write_report(rows: list[tuple[str, SegMetrics]], path: str | Path) -> None:
    Path(path).write_text(format_report(rows), encoding="utf-8")


def to_dict(m: SegMetrics) -> dict:
    return asdict(m)
