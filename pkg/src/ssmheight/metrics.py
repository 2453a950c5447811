"""Mask overlap and height-accuracy metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

CSV_HEADER = "iou,f1,rmse,delta1,delta2,delta3"


def _binary(mask, name: str) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype == bool:
        return m
    if not np.all((m == 0) | (m == 1)):
        raise ValueError(f"{name} must be binary (0/1 or bool)")
    return m.astype(bool)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(prob) >= threshold


def confusion(mask_gt, mask_pred) -> tuple:
    gt, pr = _binary(mask_gt, "mask_gt"), _binary(mask_pred, "mask_pred")
    if gt.shape != pr.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pr.shape}")
    tp = int(np.count_nonzero(gt & pr))
    fp = int(np.count_nonzero(~gt & pr))
    fn = int(np.count_nonzero(gt & ~pr))
    return tp, fp, fn


def iou_f1_from_counts(tp: int, fp: int, fn: int) -> tuple:
    if tp + fp + fn == 0:
        return 1.0, 1.0
    return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn)


def metric_iou_f1(mask_gt, mask_pred) -> tuple:
    """``(iou, f1, tp, fp, fn)``; an empty union scores 1."""
    tp, fp, fn = confusion(mask_gt, mask_pred)
    iou, f1 = iou_f1_from_counts(tp, fp, fn)
    return iou, f1, tp, fp, fn


def _per_image(h: np.ndarray) -> np.ndarray:
    # [H, W] is one image; anything with more axes is a batch along axis 0
    return h.reshape(1, -1) if h.ndim <= 2 else h.reshape(h.shape[0], -1)


def metric_rmse(h_gt, h_pred, pooled: bool = False) -> float:
    """RMSE per image, then averaged; ``pooled`` takes one RMSE over every pixel."""
    gt, pr = np.asarray(h_gt, float), np.asarray(h_pred, float)
    if gt.shape != pr.shape:
        raise ValueError(f"height shapes differ: {gt.shape} vs {pr.shape}")
    sq = (pr - gt) ** 2
    if pooled:
        return float(np.sqrt(sq.mean()))
    return float(np.sqrt(_per_image(sq).mean(axis=1)).mean())


def delta_counts(h_gt, h_pred, n: int, h_min: float = 1.0) -> tuple:
    """``(hits, qualifying)`` for the ``1.25**n`` ratio test."""
    if n not in (1, 2, 3):
        raise ValueError(f"delta order must be 1, 2 or 3, got {n}")
    gt, pr = np.asarray(h_gt, float), np.asarray(h_pred, float)
    if gt.shape != pr.shape:
        raise ValueError(f"height shapes differ: {gt.shape} vs {pr.shape}")
    keep = np.maximum(gt, pr) > h_min
    g, p = gt[keep], pr[keep]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(g / p, p / g)
    # a zero or negative height against a positive one never qualifies as close
    ratio = np.where((g > 0) & (p > 0), ratio, np.inf)
    return int(np.count_nonzero(ratio < 1.25 ** n)), int(keep.sum())


def metric_delta(h_gt, h_pred, n: int, h_min: float = 1.0) -> Optional[float]:
    """Fraction of pixels with ``max(H/H', H'/H) < 1.25**n``, over ``max(H, H') > h_min``.

    Returns ``None`` when no pixel qualifies.
    """
    hits, total = delta_counts(h_gt, h_pred, n, h_min)
    return hits / total if total else None


@dataclass
class MetricsReport:
    iou: float
    f1: float
    rmse: float
    delta1: Optional[float]
    delta2: Optional[float]
    delta3: Optional[float]
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def csv_row(self) -> str:
        vals = [self.iou, self.f1, self.rmse, self.delta1, self.delta2, self.delta3]
        return ",".join("nan" if v is None else f"{v:.6f}" for v in vals)

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricAccumulator:
    """Streams batches; masks pool confusion counts, RMSE averages per image."""

    h_min: float = 1.0
    pooled_rmse: bool = False
    threshold: float = 0.5
    tp: int = 0
    fp: int = 0
    fn: int = 0
    _rmse: list = field(default_factory=list)
    _sq_sum: float = 0.0
    _px: int = 0
    _delta: list = field(default_factory=lambda: [[0, 0], [0, 0], [0, 0]])

    def update(self, mask_gt, prob_pred, h_gt, h_pred) -> None:
        """Batch arrays shaped ``[B, H, W]`` (or ``[B, 1, H, W]``)."""
        pred = binarize(prob_pred, self.threshold)
        tp, fp, fn = confusion(mask_gt, pred)
        self.tp += tp
        self.fp += fp
        self.fn += fn
        gt, pr = np.asarray(h_gt, float), np.asarray(h_pred, float)
        sq = _per_image((pr - gt) ** 2)
        self._rmse.extend(np.sqrt(sq.mean(axis=1)).tolist())
        self._sq_sum += float(sq.sum())
        self._px += sq.size
        for i, n in enumerate((1, 2, 3)):
            hits, total = delta_counts(gt, pr, n, self.h_min)
            self._delta[i][0] += hits
            self._delta[i][1] += total

    def report(self) -> MetricsReport:
        if not self._rmse:
            raise ValueError("no batches accumulated")
        iou, f1 = iou_f1_from_counts(self.tp, self.fp, self.fn)
        rmse = math.sqrt(self._sq_sum / self._px) if self.pooled_rmse else float(np.mean(self._rmse))
        deltas = [h / t if t else None for h, t in self._delta]
        return MetricsReport(iou, f1, rmse, *deltas, tp=self.tp, fp=self.fp, fn=self.fn)


def evaluate(pairs: Iterable[tuple], h_min: float = 1.0, pooled_rmse: bool = False) -> MetricsReport:
    """``pairs`` yields ``(mask_gt, prob_pred, h_gt, h_pred)`` batches."""
    acc = MetricAccumulator(h_min=h_min, pooled_rmse=pooled_rmse)
    for batch in pairs:
        acc.update(*batch)
    return acc.report()
