"""Axis-aligned 3D boxes, anchors, RPN targets, NMS and the detection losses.

Boxes live in voxel units: voxel ``v`` spans ``[v, v + 1)`` along each axis,
so a box with integer bounds ``[lo, hi)`` covers exactly the voxels
``lo..hi-1``. Box arrays use the ``(n, 6)`` layout ``[center, size]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

SPLIT_METERS = 1.125


@dataclass(frozen=True)
class Box3:
    center: tuple
    size: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("Box3 needs 3-vectors")
        if not all(np.isfinite(c)) or not all(v > 0 and np.isfinite(v) for v in s):
            raise ValueError(f"box size must be positive and finite, got {s}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box3":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls(tuple((lo + hi) / 2), tuple(hi - lo))

    @classmethod
    def from_array(cls, a) -> "Box3":
        a = np.asarray(a, dtype=float)
        return cls(tuple(a[:3]), tuple(a[3:6]))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def as_array(self) -> np.ndarray:
        return np.array(self.center + self.size)

    def lattice(self, extents: Sequence[int] | None = None) -> tuple[tuple, tuple]:
        """Integer voxel bounds ``[lo, hi)`` nearest to the box, clipped to ``extents``.

        Every axis keeps at least one voxel.
        """
        lo = np.floor(self.lo + 0.5).astype(int)
        hi = np.floor(self.hi + 0.5).astype(int)
        hi = np.maximum(hi, lo + 1)
        if extents is not None:
            ext = np.asarray(extents, dtype=int)
            lo = np.clip(lo, 0, ext - 1)
            hi = np.clip(hi, lo + 1, ext)
        return tuple(int(v) for v in lo), tuple(int(v) for v in hi)

    def scaled(self, factor: float) -> "Box3":
        return Box3(tuple(np.asarray(self.center) * factor), tuple(np.asarray(self.size) * factor))


def boxes_array(boxes: Sequence[Box3]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 6))
    return np.stack([b.as_array() for b in boxes])


def box_iou(a: Box3, b: Box3) -> float:
    inter = np.clip(np.minimum(a.hi, b.hi) - np.maximum(a.lo, b.lo), 0.0, None).prod()
    union = a.volume + b.volume - inter
    return min(1.0, float(inter / union)) if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays ``a (n, 6)`` and ``b (m, 6)``."""
    a = np.asarray(a, dtype=float).reshape(-1, 6)
    b = np.asarray(b, dtype=float).reshape(-1, 6)
    alo, ahi = a[:, :3] - a[:, 3:] / 2, a[:, :3] + a[:, 3:] / 2
    blo, bhi = b[:, :3] - b[:, 3:] / 2, b[:, :3] + b[:, 3:] / 2
    ext = np.minimum(ahi[:, None], bhi[None]) - np.maximum(alo[:, None], blo[None])
    inter = np.clip(ext, 0.0, None).prod(axis=2)
    va = a[:, 3:].prod(axis=1)
    vb = b[:, 3:].prod(axis=1)
    return np.minimum(inter / (va[:, None] + vb[None] - inter), 1.0)


# ----------------------------------------------------------------------------
# box parametrization


def encode_box(box, anchor) -> np.ndarray:
    """Regression target of ``box`` relative to ``anchor``: center offsets
    normalized by the anchor size, then log size ratios."""
    b = box.as_array() if isinstance(box, Box3) else np.asarray(box, dtype=float)
    a = anchor.as_array() if isinstance(anchor, Box3) else np.asarray(anchor, dtype=float)
    if np.any(b[..., 3:] <= 0) or np.any(a[..., 3:] <= 0):
        raise ValueError("box and anchor sizes must be positive")
    d_center = (b[..., :3] - a[..., :3]) / a[..., 3:]
    d_size = np.log(b[..., 3:] / a[..., 3:])
    return np.concatenate([d_center, d_size], axis=-1)


def decode_box(delta, anchor) -> np.ndarray:
    """Inverse of :func:`encode_box`; returns ``[center, size]`` arrays."""
    d = np.asarray(delta, dtype=float)
    a = anchor.as_array() if isinstance(anchor, Box3) else np.asarray(anchor, dtype=float)
    if np.any(a[..., 3:] <= 0):
        raise ValueError("anchor sizes must be positive")
    center = a[..., :3] + d[..., :3] * a[..., 3:]
    size = a[..., 3:] * np.exp(d[..., 3:])
    return np.concatenate([center, size], axis=-1)


# ----------------------------------------------------------------------------
# anchors


@dataclass
class AnchorSet:
    small: np.ndarray
    big: np.ndarray
    split_voxels: float = SPLIT_METERS / 0.0469

    def __post_init__(self):
        self.small = np.asarray(self.small, dtype=float).reshape(-1, 3)
        self.big = np.asarray(self.big, dtype=float).reshape(-1, 3)

    @property
    def n_small(self) -> int:
        return len(self.small)

    @property
    def n_big(self) -> int:
        return len(self.big)

    @property
    def sizes(self) -> np.ndarray:
        return np.concatenate([self.small, self.big])

    @classmethod
    def from_sizes(cls, sizes, voxel_size: float = 0.0469, split_m: float = SPLIT_METERS) -> "AnchorSet":
        sizes = np.asarray(sizes, dtype=float).reshape(-1, 3)
        thr = split_m / voxel_size
        big = np.any(sizes > thr, axis=1)
        return cls(sizes[~big], sizes[big], thr)

    def to_dict(self) -> dict:
        return {"small": self.small.tolist(), "big": self.big.tolist(), "split_voxels": self.split_voxels}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSet":
        return cls(d.get("small", []), d.get("big", []), float(d.get("split_voxels", SPLIT_METERS / 0.0469)))


SCANNET_ANCHORS = AnchorSet(
    small=[(9, 10, 9), (17, 21, 17), (12, 19, 13), (16, 12, 15)],
    big=[(47, 20, 23), (23, 20, 47), (16, 18, 30), (17, 38, 17), (30, 18, 16)],
)

# The SUNCG table lists seven large anchors although the text mentions six.
SUNCG_ANCHORS = AnchorSet(
    small=[(8, 6, 8), (22, 22, 16), (12, 12, 20)],
    big=[(12, 12, 40), (8, 60, 40), (38, 12, 16), (62, 8, 40), (46, 8, 20), (46, 44, 20), (14, 38, 16)],
)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = ((x[:, None] - np.asarray(centers)[None]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.asarray(centers, dtype=float)


def cluster_anchors(sizes, k: int = 9, seed: int = 0, voxel_size: float = 0.0469,
                    split_m: float = SPLIT_METERS, max_iter: int = 100, tol: float = 1e-6) -> AnchorSet:
    """k-means (k-means++ seeding) over box size vectors, split at ``split_m``."""
    x = np.asarray(sizes, dtype=float).reshape(-1, 3)
    if len(x) < k:
        raise ValueError(f"need at least {k} boxes to cluster, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    for _ in range(max_iter):
        d2 = ((x[:, None] - centers[None]) ** 2).sum(-1)
        assign = d2.argmin(axis=1)
        new = centers.copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.abs(new - centers).max()
        centers = new
        if shift < tol:
            break
    order = np.lexsort((centers[:, 2], centers[:, 1], centers[:, 0], centers.prod(axis=1)))
    return AnchorSet.from_sizes(centers[order], voxel_size, split_m)


def anchor_grid(feature_extents: Sequence[int], sizes: np.ndarray, stride: int = 4) -> np.ndarray:
    """Anchors at every feature location, ordered anchor-major: index ``a * L + loc``."""
    sizes = np.asarray(sizes, dtype=float).reshape(-1, 3)
    grids = np.meshgrid(*[(np.arange(n) + 0.5) * stride for n in feature_extents], indexing="ij")
    centers = np.stack([g.reshape(-1) for g in grids], axis=1)
    L = len(centers)
    out = np.empty((len(sizes) * L, 6))
    for a, s in enumerate(sizes):
        out[a * L : (a + 1) * L, :3] = centers
        out[a * L : (a + 1) * L, 3:] = s
    return out


# ----------------------------------------------------------------------------
# target assignment


@dataclass
class AnchorTargets:
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignore
    matched: np.ndarray  # gt index for positives, -1 elsewhere
    deltas: np.ndarray  # (n, 6), valid on positives
    sampled: np.ndarray  # anchor indices used by the objectness loss
    max_iou: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def sampled_positives(self) -> np.ndarray:
        return self.sampled[self.labels[self.sampled] == 1]


def label_anchors(anchors: np.ndarray, gt: np.ndarray, pos_iou: float = 0.35, neg_iou: float = 0.15):
    """Labels, matched gt and max IoU per anchor (no sampling)."""
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt) == 0 or n == 0:
        labels[:] = 0
        return labels, matched, np.zeros(n)
    iou = iou_matrix(anchors, gt)
    best_gt = iou.argmax(axis=1)
    max_iou = iou[np.arange(n), best_gt]
    labels[max_iou < neg_iou] = 0
    pos = max_iou >= pos_iou
    labels[pos] = 1
    matched[pos] = best_gt[pos]
    for g in range(len(gt)):
        a = int(iou[:, g].argmax())
        if iou[a, g] > 0:
            labels[a] = 1
            matched[a] = g
    return labels, matched, max_iou


def assign_anchor_targets(anchors: np.ndarray, gt_boxes, rng: np.random.Generator, batch: int = 64,
                          pos_iou: float = 0.35, neg_iou: float = 0.15) -> AnchorTargets:
    """Label every anchor against the gt boxes and sample up to ``batch`` of them.

    Sampling aims for half positives and fills the remainder with negatives.
    """
    gt = gt_boxes if isinstance(gt_boxes, np.ndarray) else boxes_array(list(gt_boxes))
    gt = np.asarray(gt, dtype=float).reshape(-1, 6)
    labels, matched, max_iou = label_anchors(anchors, gt, pos_iou, neg_iou)
    deltas = np.zeros((len(anchors), 6))
    pos_idx = np.flatnonzero(labels == 1)
    if len(pos_idx):
        deltas[pos_idx] = encode_box(gt[matched[pos_idx]], anchors[pos_idx])
    neg_idx = np.flatnonzero(labels == 0)
    n_pos = min(len(pos_idx), batch // 2)
    take_pos = rng.choice(pos_idx, n_pos, replace=False) if n_pos else np.zeros(0, dtype=np.int64)
    n_neg = min(len(neg_idx), batch - n_pos)
    take_neg = rng.choice(neg_idx, n_neg, replace=False) if n_neg else np.zeros(0, dtype=np.int64)
    sampled = np.sort(np.concatenate([take_pos, take_neg]).astype(np.int64))
    return AnchorTargets(labels, matched, deltas, sampled, max_iou)


# ----------------------------------------------------------------------------
# suppression


def nms(boxes, scores, iou_threshold: float = 0.5) -> list[int]:
    """Greedy suppression in descending score order, ties by lower index."""
    b = boxes_array(boxes) if not isinstance(boxes, np.ndarray) else np.asarray(boxes, dtype=float).reshape(-1, 6)
    s = np.asarray(scores, dtype=float).reshape(-1)
    if len(b) != len(s):
        raise ValueError("boxes and scores differ in length")
    order = np.argsort(-s, kind="stable")
    suppressed = np.zeros(len(b), dtype=bool)
    keep: list[int] = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        rest = order[pos + 1 :]
        rest = rest[~suppressed[rest]]
        if len(rest):
            ious = iou_matrix(b[i : i + 1], b[rest])[0]
            suppressed[rest[ious > iou_threshold]] = True
    return keep


# ----------------------------------------------------------------------------
# proposals and losses


@dataclass
class ScaleLayout:
    """Where one RPN scale's anchors live in the concatenated anchor list."""

    offset: int
    n_anchors: int
    n_locations: int
    feature_extents: tuple


def scale_layouts(feature_extents: Sequence[int], anchor_set: AnchorSet) -> list[ScaleLayout]:
    L = int(np.prod(feature_extents))
    out = []
    offset = 0
    for n in (anchor_set.n_small, anchor_set.n_big):
        out.append(ScaleLayout(offset, n, L, tuple(feature_extents)))
        offset += n * L
    return out


def all_anchors(feature_extents: Sequence[int], anchor_set: AnchorSet, stride: int = 4) -> np.ndarray:
    parts = [anchor_grid(feature_extents, s, stride) for s in (anchor_set.small, anchor_set.big) if len(s)]
    return np.concatenate(parts) if parts else np.zeros((0, 6))


def _split(idx: np.ndarray, layouts: Sequence[ScaleLayout]):
    """Yield (scale, a, loc, positions-in-idx) for global anchor indices."""
    for s, lay in enumerate(layouts):
        sel = np.flatnonzero((idx >= lay.offset) & (idx < lay.offset + lay.n_anchors * lay.n_locations))
        if len(sel) == 0:
            continue
        local = idx[sel] - lay.offset
        yield s, local // lay.n_locations, local % lay.n_locations, sel


def objectness_logits(rpn: Sequence[tuple], idx: np.ndarray, layouts: Sequence[ScaleLayout]) -> Tensor:
    """Positive-minus-negative logit per anchor, in the order of ``idx``."""
    parts, order = [], []
    for s, a, loc, sel in _split(idx, layouts):
        L = layouts[s].n_locations
        cls = rpn[s][0]
        pos = T.take(cls, (2 * a + 1) * L + loc)
        neg = T.take(cls, (2 * a) * L + loc)
        parts.append(T.sub(pos, neg))
        order.append(sel)
    return _gather_parts(parts, order, len(idx))


def box_deltas(rpn: Sequence[tuple], idx: np.ndarray, layouts: Sequence[ScaleLayout]) -> Tensor:
    """Predicted 6-vectors for the given anchors, flattened to ``len(idx) * 6``."""
    parts, order = [], []
    for s, a, loc, sel in _split(idx, layouts):
        L = layouts[s].n_locations
        flat = ((6 * a[:, None] + np.arange(6)[None]) * L + loc[:, None]).reshape(-1)
        parts.append(T.take(rpn[s][1], flat))
        order.append((sel[:, None] * 6 + np.arange(6)[None]).reshape(-1))
    return _gather_parts(parts, order, len(idx) * 6)


def _gather_parts(parts, order, n) -> Tensor:
    perm = np.concatenate(order)
    if np.array_equal(perm, np.arange(n)):
        return _concat_all(parts)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return T.take(_concat_all(parts), inv)


def _concat_flat(a: Tensor, b: Tensor) -> Tensor:
    # concat_channels works on the leading axis; view vectors as [n, 1]
    return T.reshape(T.concat_channels(T.reshape(a, (a.size, 1)), T.reshape(b, (b.size, 1))), (a.size + b.size,))


@dataclass
class Proposals:
    boxes: np.ndarray  # (n, 6)
    scores: np.ndarray
    scale: np.ndarray  # 0 small-anchor scale, 1 big-anchor scale
    anchor_index: np.ndarray


def propose(rpn: Sequence[tuple], anchors: np.ndarray, layouts: Sequence[ScaleLayout], extents: Sequence[int],
            pre_nms: int = 512, post_nms: int = 64, iou_threshold: float = 0.5, min_size: float = 1.0) -> Proposals:
    """Decode, clip and suppress anchor predictions into scored boxes."""
    scores, deltas, scale_of = [], [], []
    for s, lay in enumerate(layouts):
        if lay.n_anchors == 0:
            continue
        A, L = lay.n_anchors, lay.n_locations
        cls = rpn[s][0].data.reshape(A, 2, L)
        scores.append(1.0 / (1.0 + np.exp(-(cls[:, 1] - cls[:, 0]))).reshape(-1))
        dl = rpn[s][1].data.reshape(A, 6, L).transpose(0, 2, 1).reshape(-1, 6)
        deltas.append(dl)
        scale_of.append(np.full(A * L, s))
    if not scores:
        return Proposals(np.zeros((0, 6)), np.zeros(0), np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    score = np.concatenate(scores)
    delta = np.clip(np.concatenate(deltas), -10.0, 10.0)
    delta[:, 3:] = np.clip(delta[:, 3:], -4.0, 4.0)
    scale = np.concatenate(scale_of)
    idx = np.argsort(-score, kind="stable")[:pre_nms]
    boxes = decode_box(delta[idx], anchors[idx])
    ext = np.asarray(extents, dtype=float)
    lo = np.clip(boxes[:, :3] - boxes[:, 3:] / 2, 0.0, ext)
    hi = np.clip(boxes[:, :3] + boxes[:, 3:] / 2, 0.0, ext)
    ok = np.all(hi - lo >= min_size, axis=1)
    idx, lo, hi = idx[ok], lo[ok], hi[ok]
    boxes = np.concatenate([(lo + hi) / 2, hi - lo], axis=1)
    keep = nms(boxes, score[idx], iou_threshold)[:post_nms]
    keep = np.asarray(keep, dtype=int)
    return Proposals(boxes[keep], score[idx][keep], scale[idx][keep], idx[keep])


def _mean_of(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(terms))


def detection_losses(rpn: Sequence[tuple], layouts: Sequence[ScaleLayout], targets: AnchorTargets,
                     roi_logits: Sequence[Tensor] = (), roi_labels: Sequence[int] = (),
                     roi_refine: Sequence[Tensor] = (), roi_refine_targets: Sequence[np.ndarray] = ()) -> dict:
    """Objectness BCE, box Huber and RoI classification CE.

    ``obj`` is the mean BCE over the sampled anchors, ``box`` the mean Huber
    over sampled positives (plus the class-specific refinement term when
    refinements are given) and ``cls`` the mean cross entropy over RoIs.
    Terms without any contributing sample are a constant zero.
    """
    zero = Tensor(np.asarray(0.0))
    out = {}
    idx = targets.sampled
    if len(idx):
        logits = objectness_logits(rpn, idx, layouts)
        out["obj"] = T.loss_bce_with_logits(logits, (targets.labels[idx] == 1).astype(float))
    else:
        out["obj"] = zero
    pos = targets.sampled_positives
    box_terms = []
    if len(pos):
        pred = box_deltas(rpn, pos, layouts)
        box_terms.append(T.loss_huber(pred, targets.deltas[pos].reshape(-1)))
    if len(roi_refine):
        pred = roi_refine[0] if len(roi_refine) == 1 else _concat_all(roi_refine)
        box_terms.append(T.loss_huber(pred, np.concatenate([np.asarray(t).reshape(-1) for t in roi_refine_targets])))
    if box_terms:
        total = box_terms[0]
        for t in box_terms[1:]:
            total = T.add(total, t)
        out["box"] = total
    else:
        out["box"] = zero
    if len(roi_logits):
        out["cls"] = _mean_of([T.loss_cross_entropy(l, int(c)) for l, c in zip(roi_logits, roi_labels)])
    else:
        out["cls"] = zero
    return out


def _concat_all(parts: Sequence[Tensor]) -> Tensor:
    acc = parts[0]
    for p in parts[1:]:
        acc = _concat_flat(acc, p)
    return acc
