"""Per-instance completion targets and losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .detection import Box3, box_iou, iou_matrix
from .network import box_lattice
from .tensor import ShapeError, Tensor

MATCH_IOU = 0.5


@dataclass(frozen=True)
class MatchedPair:
    pred: int
    gt: int
    iou: float


def match_predictions(pred_boxes, gt_boxes, threshold: float = MATCH_IOU) -> list[MatchedPair]:
    """Pair each prediction with its best-overlapping gt box when IoU >= threshold.

    Ties go to the lower gt index; several predictions may share one gt.
    """
    pred = np.asarray(pred_boxes, dtype=float).reshape(-1, 6)
    gt = np.asarray(gt_boxes, dtype=float).reshape(-1, 6)
    if len(pred) == 0 or len(gt) == 0:
        return []
    ious = iou_matrix(pred, gt)
    best = ious.argmax(axis=1)
    return [MatchedPair(i, int(j), float(ious[i, j])) for i, j in enumerate(best) if ious[i, j] >= threshold]


def _as_box(b) -> Box3:
    return b if isinstance(b, Box3) else Box3.from_array(b)


def completion_target(gt_mask: np.ndarray, gt_box, pred_box, extents, check_iou: bool = True) -> np.ndarray:
    """Binary target over the predicted box's voxel window.

    Voxels inside both windows copy the gt mask; the rest are zero. ``gt_mask``
    spans the gt box lattice; ``extents`` is the volume the prediction lives in.
    """
    gt_box, pred_box = _as_box(gt_box), _as_box(pred_box)
    if check_iou and box_iou(gt_box, pred_box) < MATCH_IOU:
        raise ValueError(f"completion target needs IoU >= {MATCH_IOU}, got {box_iou(gt_box, pred_box):.3f}")
    glo, ghi = gt_box.lattice()
    gt_mask = np.asarray(gt_mask, dtype=bool)
    if gt_mask.shape != tuple(h - l for l, h in zip(glo, ghi)):
        raise ShapeError(f"gt mask {gt_mask.shape} does not span its box lattice {glo}..{ghi}")
    plo, phi = box_lattice(pred_box, extents)
    out = np.zeros(tuple(h - l for l, h in zip(plo, phi)), dtype=bool)
    a = np.maximum(plo, glo)
    b = np.minimum(phi, ghi)
    if np.all(b > a):
        dst = tuple(slice(x - l, y - l) for x, y, l in zip(a, b, plo))
        src = tuple(slice(x - l, y - l) for x, y, l in zip(a, b, glo))
        out[dst] = gt_mask[src]
    return out


def completion_loss(logits: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """Mean over pairs of the per-pair mean BCE; zero for no pairs."""
    if len(logits) != len(targets):
        raise ValueError(f"{len(logits)} logits for {len(targets)} targets")
    if not logits:
        return Tensor(np.asarray(0.0))
    total = None
    for lg, tg in zip(logits, targets):
        term = T.loss_bce_with_logits(lg, np.asarray(tg, dtype=float))
        total = term if total is None else T.add(total, term)
    return T.scale(total, 1.0 / len(logits))


def proxy_target(instances, extents) -> np.ndarray:
    """Union of all complete instance masks in a grid of ``extents``."""
    out = np.zeros(tuple(extents), dtype=bool)
    for inst in instances:
        out |= inst.paint(tuple(extents))
    return out


def proxy_loss(proxy_logits: Tensor, instances) -> Tensor:
    """BCE of the one-channel scene logits against the instance union."""
    if proxy_logits.data.ndim != 4 or proxy_logits.shape[0] != 1:
        raise ShapeError(f"proxy logits must be [1, X, Y, Z], got {proxy_logits.shape}")
    target = proxy_target(instances, proxy_logits.shape[1:])
    return T.loss_bce_with_logits(proxy_logits, target[None].astype(float))
