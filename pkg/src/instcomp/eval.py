"""mAP@0.5 scoring for completion, segmentation and detection, plus the completeness breakdown."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .codec import rle_from_b64, rle_to_b64
from .detection import iou_matrix
from .fusion import dilate

TASKS = ("completion", "segmentation", "detection")
DEFAULT_BINS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass
class Prediction:
    class_id: int
    score: float
    box: np.ndarray  # (6,) center + size, voxel units of the scene grid
    mask: np.ndarray  # bool over the voxel window starting at ``lo``
    lo: tuple

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=float).reshape(6)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.lo = tuple(int(v) for v in self.lo)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_json(self, scene_id: str) -> str:
        return json.dumps({
            "scene": scene_id, "class_id": int(self.class_id), "score": float(self.score),
            "box": [float(v) for v in self.box], "lo": list(self.lo), "shape": list(self.mask.shape),
            "mask_rle": rle_to_b64(self.mask),
        })

    @classmethod
    def from_json(cls, line: str) -> tuple[str, "Prediction"]:
        d = json.loads(line)
        mask = rle_from_b64(d["mask_rle"], tuple(d["shape"]))
        return d["scene"], cls(d["class_id"], d["score"], d["box"], mask, tuple(d["lo"]))


@dataclass
class EvalRecord:
    scene_id: str
    extents: tuple
    predictions: list  # Prediction
    gt: list  # InstanceGT in scene voxel coordinates
    surface: np.ndarray  # partial-scan occupancy, bool over ``extents``
    _cache: dict = field(default_factory=dict, repr=False)


# ----------------------------------------------------------------------------
# masks


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Voxel IoU of two masks on the same lattice; two empty masks score 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def segmentation_from_completion(complete: np.ndarray, surface: np.ndarray) -> np.ndarray:
    return np.logical_and(complete, surface)


def _flat(mask: np.ndarray, lo, extents) -> np.ndarray:
    """Sorted flat scene indices of a windowed mask, clipped to the scene."""
    idx = np.argwhere(mask) + np.asarray(lo, dtype=int)
    ext = np.asarray(extents)
    idx = idx[np.all((idx >= 0) & (idx < ext), axis=1)]
    return np.ravel_multi_index(idx.T, tuple(extents)) if len(idx) else np.zeros(0, dtype=np.int64)


def _sparse_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.intersect1d(a, b, assume_unique=True).size
    union = a.size + b.size - inter
    return inter / union if union else 0.0


def _surface_flat(rec: EvalRecord) -> np.ndarray:
    if "surface" not in rec._cache:
        rec._cache["surface"] = np.flatnonzero(rec.surface.reshape(-1))
    return rec._cache["surface"]


def _pred_sets(rec: EvalRecord, task: str) -> list:
    key = ("pred", task)
    if key not in rec._cache:
        full = [_flat(p.mask, p.lo, rec.extents) for p in rec.predictions]
        if task == "segmentation":
            s = _surface_flat(rec)
            full = [np.intersect1d(f, s, assume_unique=True) for f in full]
        rec._cache[key] = full
    return rec._cache[key]


def _gt_sets(rec: EvalRecord, task: str) -> list:
    key = ("gt", task)
    if key not in rec._cache:
        full = [_flat(g.mask, g.lattice[0], rec.extents) for g in rec.gt]
        if task == "segmentation":
            s = _surface_flat(rec)
            full = [np.intersect1d(f, s, assume_unique=True) for f in full]
        rec._cache[key] = full
    return rec._cache[key]


def _ious(rec: EvalRecord, task: str) -> np.ndarray:
    """(n_pred, n_gt) overlap matrix for the task."""
    key = ("iou", task)
    if key not in rec._cache:
        n, m = len(rec.predictions), len(rec.gt)
        if n == 0 or m == 0:
            out = np.zeros((n, m))
        elif task == "detection":
            out = iou_matrix(np.stack([p.box for p in rec.predictions]), np.stack([g.box.as_array() for g in rec.gt]))
        else:
            P, G = _pred_sets(rec, task), _gt_sets(rec, task)
            out = np.array([[_sparse_iou(p, g) for g in G] for p in P])
        rec._cache[key] = out
    return rec._cache[key]


def _gt_valid(rec: EvalRecord, task: str) -> np.ndarray:
    """Segmentation only scores instances that left at least one voxel in the partial scan."""
    if task == "segmentation":
        return np.array([g.size > 0 for g in _gt_sets(rec, task)], dtype=bool)
    return np.ones(len(rec.gt), dtype=bool)


# ----------------------------------------------------------------------------
# average precision


def ap_from_matches(tp: Sequence[bool], n_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP sequence."""
    if n_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def _ranked(records: Sequence[EvalRecord], class_id: int) -> list[tuple[int, int]]:
    order = sorted(range(len(records)), key=lambda r: records[r].scene_id)
    items = [(r, i) for r in order for i, p in enumerate(records[r].predictions) if p.class_id == class_id]
    # stable sort keeps (scene id, index) order among equal scores
    return sorted(items, key=lambda ri: -records[ri[0]].predictions[ri[1]].score)


def match_class(records: Sequence[EvalRecord], task: str, class_id: int, iou: float = 0.5,
                gt_filter=None) -> tuple[list[bool], int, list]:
    """Greedy ranked matching for one class.

    Each prediction targets its highest-overlap gt of the same class in its
    scene; it is a true positive if that gt is still unmatched and the overlap
    reaches ``iou``. ``gt_filter(record_index, gt_index)`` restricts the gt set;
    predictions whose best gt is filtered out are dropped instead of scored.
    Returns the TP flags in rank order, the gt count and the ranked items kept.
    """
    used = [np.zeros(len(r.gt), dtype=bool) for r in records]
    tp, kept = [], []
    n_gt = 0
    allowed = []
    for ri, rec in enumerate(records):
        ok = _gt_valid(rec, task) & np.array([g.class_id == class_id for g in rec.gt], dtype=bool)
        if gt_filter is not None:
            keep = np.array([gt_filter(ri, j) for j in range(len(rec.gt))], dtype=bool)
            n_gt += int((ok & keep).sum())
            allowed.append((ok, keep))
        else:
            n_gt += int(ok.sum())
            allowed.append((ok, np.ones(len(rec.gt), dtype=bool)))
    for ri, pi in _ranked(records, class_id):
        ok, keep = allowed[ri]
        row = np.where(ok, _ious(records[ri], task)[pi], -1.0) if len(ok) else np.zeros(0)
        if row.size and row.max() > 0:
            j = int(np.argmax(row))
            if not keep[j]:
                continue
            hit = bool(row[j] >= iou and not used[ri][j])
            if hit:
                used[ri][j] = True
        else:
            hit = False
        tp.append(hit)
        kept.append((ri, pi))
    return tp, n_gt, kept


def average_precision(records: Sequence[EvalRecord], task: str, n_classes: int, iou: float = 0.5,
                      class_names: Sequence[str] | None = None, gt_filter=None) -> dict:
    """Per-class AP and their mean over classes that have ground truth.

    ``map`` is None when no class has ground truth.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    names = class_names or [f"class{c}" for c in range(n_classes)]
    per = {}
    for c in range(n_classes):
        tp, n_gt, _ = match_class(records, task, c, iou, gt_filter)
        if n_gt:
            per[names[c]] = ap_from_matches(tp, n_gt)
    return {"per_class": per, "map": float(np.mean(list(per.values()))) if per else None}


# ----------------------------------------------------------------------------
# completeness


def mask_surface(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a 6-neighbor outside the mask."""
    m = np.asarray(mask, dtype=bool)
    return m & dilate(~np.pad(m, 1))[1:-1, 1:-1, 1:-1]


def instance_completeness(inst, surface: np.ndarray) -> float:
    """Fraction of the instance's surface voxels inside the partial scan."""
    surf = mask_surface(inst.mask)
    lo, _ = inst.lattice
    a = _flat(surf, lo, surface.shape)
    seen = surface.reshape(-1)[a].sum() if a.size else 0
    return float(seen / max(1, np.count_nonzero(surf)))


def bin_index(value: float, edges: Sequence[float]) -> int:
    """Bins are ``[e_k, e_k+1)`` with the last one closed."""
    edges = np.asarray(edges, dtype=float)
    if value < edges[0] or value > edges[-1]:
        raise ValueError(f"{value} outside bins {edges.tolist()}")
    return int(min(np.searchsorted(edges, value, side="right") - 1, len(edges) - 2))


def completeness_histogram(records: Sequence[EvalRecord], n_classes: int, edges: Sequence[float] = DEFAULT_BINS,
                           task: str = "completion", iou: float = 0.5) -> list[dict]:
    """Completion mAP per completeness bin; empty bins report ``map`` None.

    Each gt instance lands in exactly one bin. A prediction is scored in the bin
    of the gt it overlaps most; predictions overlapping nothing count against
    every bin.
    """
    edges = list(edges)
    if edges[0] != 0.0 or edges[-1] != 1.0 or np.any(np.diff(edges) <= 0):
        raise ValueError("bins must be increasing and cover [0, 1]")
    assign = completeness_assignments(records, edges)
    out = []
    for k in range(len(edges) - 1):
        count = sum(a == k for row in assign for a in row)
        entry = {"lo": edges[k], "hi": edges[k + 1], "n_gt": int(count), "map": None}
        if count:
            res = average_precision(records, task, n_classes, iou,
                                    gt_filter=lambda ri, j, k=k: assign[ri][j] == k)
            entry["map"] = res["map"]
        out.append(entry)
    return out


def completeness_assignments(records: Sequence[EvalRecord], edges: Sequence[float] = DEFAULT_BINS) -> list[list[int]]:
    return [[bin_index(instance_completeness(g, r.surface), edges) for g in r.gt] for r in records]


def metrics_report(records: Sequence[EvalRecord], n_classes: int, class_names: Sequence[str] | None = None,
                   edges: Sequence[float] = DEFAULT_BINS) -> dict:
    report = {t: average_precision(records, t, n_classes, class_names=class_names) for t in TASKS}
    report["completeness_bins"] = completeness_histogram(records, n_classes, edges)
    return report
