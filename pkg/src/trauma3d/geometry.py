"""Axis-aligned 3D boxes, IoU, optimal assignment and mAP evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAP_THRESHOLDS = (0.10, 0.25, 0.50, 0.75)

# (z, y, x) sign bits as a 3-bit counter: vertex v uses +half on axis a iff bit (2 - a) of v is set
VERTEX_SIGNS = np.array([[(v >> 2) & 1, (v >> 1) & 1, v & 1] for v in range(8)], dtype=np.float64) * 2 - 1


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class BBox3D:
    """Centre/size box in ``frame`` "model" (normalized [0,1]^3) or "voxel" units."""
    center: tuple
    size: tuple
    frame: str = "voxel"

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if min(self.size) <= 0:
            raise ValueError(f"box sizes must be positive, got {self.size}")

    @classmethod
    def from_corners(cls, lo, hi, frame="voxel"):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        return cls(tuple((lo + hi) / 2), tuple(hi - lo), frame)

    @classmethod
    def from_inclusive(cls, corners):
        """Voxel hull (min..max inclusive) -> continuous box [min, max + 1)."""
        c = np.asarray(corners, float)
        return cls.from_corners(c[:3], c[3:] + 1.0, "voxel")

    def corners(self):
        c, h = np.asarray(self.center), np.asarray(self.size) / 2
        return c - h, c + h

    def to_model(self, dims):
        d = np.asarray(dims, float)
        return BBox3D(tuple(np.asarray(self.center) / d), tuple(np.asarray(self.size) / d), "model")

    def to_voxel(self, dims):
        d = np.asarray(dims, float)
        return BBox3D(tuple(np.asarray(self.center) * d), tuple(np.asarray(self.size) * d), "voxel")

    @property
    def volume(self):
        return float(np.prod(self.size))


@dataclass(frozen=True)
class Detection:
    box: BBox3D
    category: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def vertices(box):
    """The 8 corners of ``box`` as an (8, 3) array in sign-counter order."""
    return np.asarray(box.center) + VERTEX_SIGNS * (np.asarray(box.size) / 2)


def iou3d(a, b):
    alo, ahi = a.corners()
    blo, bhi = b.corners()
    inter = np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0.0, None))
    union = a.volume + b.volume - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(centers_a, sizes_a, centers_b, sizes_b):
    """Pairwise IoU for arrays of centres/sizes, shapes (n,3) and (m,3)."""
    alo, ahi = centers_a - sizes_a / 2, centers_a + sizes_a / 2
    blo, bhi = centers_b - sizes_b / 2, centers_b + sizes_b / 2
    ext = np.clip(np.minimum(ahi[:, None], bhi[None]) - np.maximum(alo[:, None], blo[None]), 0.0, None)
    inter = ext.prod(-1)
    union = sizes_a.prod(-1)[:, None] + sizes_b.prod(-1)[None] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _assign_rows(cost):
    """Shortest-augmenting-path assignment for n rows <= m cols.

    Rows are inserted in ascending order; among equal reduced costs the lowest
    column index wins (``argmin`` returns the first minimum).
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)   # owner[j] = 1-based row on column j, 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    rows = owner[1:] - 1
    cols = np.flatnonzero(owner[1:])
    return rows[cols], cols


def hungarian_match(cost):
    """Minimum-cost injective matching; returns ``(rows, cols)`` sorted by row."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    if cost.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if cost.shape[0] <= cost.shape[1]:
        rows, cols = _assign_rows(cost)
    else:
        cols, rows = _assign_rows(cost.T)
    order = np.argsort(rows, kind="stable")
    return rows[order], cols[order]


def average_precision(tp_flags, n_gt):
    """All-point interpolated AP from TP flags in ranked order."""
    tp = np.asarray(tp_flags, dtype=np.float64)
    if n_gt == 0:
        raise UndefinedMetricError("AP undefined without ground truths")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _flag_detections(dets, gts, thr):
    """Greedy ranking/matching for one category; returns TP flags in score order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][2])
    matched = {}
    flags = []
    for i in order:
        vol, box, _ = dets[i]
        cands = [(j, iou3d(box, g)) for j, g in enumerate(gts.get(vol, [])) if not matched.get((vol, j))]
        if cands:
            j, best = max(cands, key=lambda t: (t[1], -t[0]))
            if best >= thr:
                matched[(vol, j)] = True
                flags.append(1)
                continue
        flags.append(0)
    return flags


def evaluate_detections(detections, ground_truths, thresholds=MAP_THRESHOLDS):
    """mAP report over volumes.

    ``detections[v]`` is a list of :class:`Detection`, ``ground_truths[v]`` a
    list of ``(BBox3D, category)``.  Returns a dict with ``map`` (threshold ->
    mAP), ``ap`` (threshold -> {category: AP}) and ``counts``.
    """
    gt_by_cat, det_by_cat = {}, {}
    for v, gts in enumerate(ground_truths):
        for box, cat in gts:
            gt_by_cat.setdefault(int(cat), {}).setdefault(v, []).append(box)
    if not gt_by_cat:
        raise UndefinedMetricError("no ground truth boxes: mAP is undefined")
    for v, dets in enumerate(detections):
        for d in dets:
            det_by_cat.setdefault(int(d.category), []).append((v, d.box, float(d.score)))
    report = {"map": {}, "ap": {}, "counts": {}}
    for thr in thresholds:
        aps = {}
        for cat in sorted(gt_by_cat):
            gts = gt_by_cat[cat]
            n_gt = sum(len(b) for b in gts.values())
            flags = _flag_detections(det_by_cat.get(cat, []), gts, thr)
            aps[cat] = average_precision(flags, n_gt)
        report["ap"][float(thr)] = aps
        report["map"][float(thr)] = float(np.mean(list(aps.values())))
    report["counts"] = {
        "volumes": len(ground_truths),
        "ground_truths": {c: sum(len(b) for b in g.values()) for c, g in sorted(gt_by_cat.items())},
        "detections": {c: len(d) for c, d in sorted(det_by_cat.items())},
    }
    return report


def map_at(detections, ground_truths, thresholds=MAP_THRESHOLDS):
    """Threshold -> mAP."""
    return evaluate_detections(detections, ground_truths, thresholds)["map"]


def report_json(report):
    """JSON-ready copy of an evaluate_detections report (string keys)."""
    return {
        "map": {f"{t:.2f}": v for t, v in report["map"].items()},
        "ap": {f"{t:.2f}": {str(c): a for c, a in aps.items()} for t, aps in report["ap"].items()},
        "counts": {
            "volumes": report["counts"]["volumes"],
            "ground_truths": {str(c): n for c, n in report["counts"]["ground_truths"].items()},
            "detections": {str(c): n for c, n in report["counts"]["detections"].items()},
        },
    }
