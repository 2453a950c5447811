"""Segmentation and height objectives.

Every loss reduces to a per-pixel mean by default so that the edge weight is
independent of resolution; ``reduction="sum"`` gives the raw pixel sums.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, ops

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class LossConfig:
    edge_weight: float = 10.0
    huber_delta: float = 1.0
    eps: float = 1e-7
    reduction: str = "mean"

    def __post_init__(self):
        if self.edge_weight < 0:
            raise ValueError(f"edge weight must be nonnegative, got {self.edge_weight}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber delta must be positive, got {self.huber_delta}")
        if not 0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


DEFAULT = LossConfig()


def _check(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ops.ShapeError(f"{what}: target shape {a.shape} != prediction shape {b.shape}")


def _reduce(x: Tensor, reduction: str) -> Tensor:
    return ops.mean(x) if reduction == "mean" else ops.sum(x)


def _bce(target: Tensor, pred: Tensor, cfg: LossConfig) -> Tensor:
    p = ops.clamp(pred, cfg.eps, 1.0 - cfg.eps)
    pos = ops.mul(target, ops.log(p))
    neg = ops.mul(ops.sub(1.0, target), ops.log(ops.sub(1.0, p)))
    return ops.neg(_reduce(ops.add(pos, neg), cfg.reduction))


def loss_ce(s_gt, s_pred, config: LossConfig = DEFAULT) -> Tensor:
    """Binary cross-entropy on mask probabilities."""
    s_gt, s_pred = as_tensor(s_gt), as_tensor(s_pred)
    _check(s_gt, s_pred, "loss_ce")
    return _bce(s_gt, s_pred, config)


def loss_dice(s_gt, s_pred, config: LossConfig = DEFAULT) -> Tensor:
    s_gt, s_pred = as_tensor(s_gt), as_tensor(s_pred)
    _check(s_gt, s_pred, "loss_dice")
    inter = ops.sum(ops.mul(s_gt, s_pred))
    denom = ops.add(ops.add(ops.sum(s_gt), ops.sum(s_pred)), config.eps)
    return ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), config.eps), denom))


def edge_map(s) -> Tensor:
    """``clamp(|L * s|, 0, 1)`` with the 3x3 Laplacian and zero padding, per image.

    Accepts ``[B, 1, H, W]`` or ``[B, H, W]``; the result keeps the input shape.
    """
    s = as_tensor(s)
    squeeze = s.ndim == 3
    x = ops.reshape(s, (s.shape[0], 1) + s.shape[1:]) if squeeze else s
    if x.ndim != 4 or x.shape[1] != 1:
        raise ops.ShapeError(f"edge_map expects [B, 1, H, W] or [B, H, W], got {s.shape}")
    lap = ops.conv2d(x, Tensor(LAPLACIAN[None, None]), padding=1)
    out = ops.clamp(ops.abs(lap), 0.0, 1.0)
    return ops.reshape(out, s.shape) if squeeze else out


def loss_edge(s_gt, s_pred, config: LossConfig = DEFAULT) -> Tensor:
    s_gt, s_pred = as_tensor(s_gt), as_tensor(s_pred)
    _check(s_gt, s_pred, "loss_edge")
    return _bce(edge_map(s_gt), edge_map(s_pred), config)


def loss_seg(s_gt, s_pred, config: LossConfig = DEFAULT) -> Tensor:
    parts = seg_parts(s_gt, s_pred, config)
    return ops.add(ops.add(parts["ce"], parts["dice"]), ops.mul(parts["edge"], config.edge_weight))


def seg_parts(s_gt, s_pred, config: LossConfig = DEFAULT) -> dict:
    return {
        "ce": loss_ce(s_gt, s_pred, config),
        "dice": loss_dice(s_gt, s_pred, config),
        "edge": loss_edge(s_gt, s_pred, config),
    }


def loss_huber(h_gt, h_pred, delta: float = 1.0, reduction: str = "mean") -> Tensor:
    """``0.5 e^2`` for ``|e| < delta`` else ``delta |e| - 0.5 delta^2``."""
    if delta <= 0:
        raise ValueError(f"huber delta must be positive, got {delta}")
    h_gt, h_pred = as_tensor(h_gt), as_tensor(h_pred)
    _check(h_gt, h_pred, "loss_huber")
    e = ops.sub(h_pred, h_gt)
    small = np.abs(e.data) < delta
    quad = ops.mul(ops.mul(e, e), 0.5)
    lin = ops.sub(ops.mul(ops.abs(e), delta), 0.5 * delta * delta)
    return _reduce(ops.where(small, quad, lin), reduction)


def loss_total(s_gt, s_pred, h_gt, h_pred, config: LossConfig = DEFAULT) -> Tensor:
    return ops.add(loss_seg(s_gt, s_pred, config),
                   loss_huber(h_gt, h_pred, config.huber_delta, config.reduction))


def loss_breakdown(s_gt, s_pred, h_gt, h_pred, config: LossConfig = DEFAULT) -> dict:
    """All components plus ``seg``, ``reg`` and ``total`` in one pass (shared graph)."""
    parts = seg_parts(s_gt, s_pred, config)
    seg = ops.add(ops.add(parts["ce"], parts["dice"]), ops.mul(parts["edge"], config.edge_weight))
    reg = loss_huber(h_gt, h_pred, config.huber_delta, config.reduction)
    return dict(parts, seg=seg, reg=reg, total=ops.add(seg, reg))
