"""Detection metrics: rotated-box IoU, AP/APH, distance-bucket reports.

Matching is greedy per frame by descending detection score; each ground
truth box matches at most one detection at IoU >= the class threshold.
AP integrates the precision-recall curve with 101-point interpolation.
APH additionally weights every true positive by heading accuracy,
1 - |yaw error wrapped to [-pi, pi]| / pi, in both the precision and
recall numerators, so APH <= AP always.

Note on thresholds: the defaults follow the source material as printed,
0.5 IoU for vehicles and 0.7 for pedestrians (the reverse of the usual
Waymo convention); both are plain config values.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .geometry import Box7DoF, box_corners_bev, wrap_angle

if TYPE_CHECKING:  # pragma: no cover
    from .detector import Detection

__all__ = [
    "EvalConfig", "PRCurve", "ClassBucketResult",
    "iou_bev", "iou_3d", "evaluate",
    "format_report", "write_report_csv",
    "DEFAULT_IOU_THRESHOLDS", "DISTANCE_BUCKETS",
]

DEFAULT_IOU_THRESHOLDS = {"vehicle": 0.5, "pedestrian": 0.7}

#: (label, lo, hi) partition of [0, inf) by ground-truth center range.
DISTANCE_BUCKETS = (("<30m", 0.0, 30.0), ("30-50m", 30.0, 50.0), (">50m", 50.0, np.inf))


# ---------------------------------------------------------------------------
# Rotated-box IoU via convex polygon clipping


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a convex CCW polygon."""
    output = list(subject)
    m = len(clip)
    for i in range(m):
        a, b = clip[i], clip[(i + 1) % m]
        edge = b - a
        if not output:
            break
        input_pts = output
        output = []
        prev = input_pts[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for cur in input_pts:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            if cur_in != prev_in:
                # intersection of segment prev->cur with the edge line
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                t = (edge[0] * (a[1] - prev[1]) - edge[1] * (a[0] - prev[0])) / denom
                output.append(prev + t * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def _area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _bev_intersection_area(a: Box7DoF, b: Box7DoF) -> float:
    return _area(_clip_polygon(box_corners_bev(a), box_corners_bev(b)))


def iou_bev(a: Box7DoF, b: Box7DoF) -> float:
    """Top-down IoU of the yaw-rotated footprints."""
    inter = _bev_intersection_area(a, b)
    union = a.bev_area + b.bev_area - inter
    return inter / union if union > 0 else 0.0


def iou_3d(a: Box7DoF, b: Box7DoF) -> float:
    """Volume IoU: footprint intersection times vertical overlap."""
    inter_area = _bev_intersection_area(a, b)
    za0, za1 = a.center[2] - a.height / 2, a.center[2] + a.height / 2
    zb0, zb1 = b.center[2] - b.height / 2, b.center[2] + b.height / 2
    dz = max(0.0, min(za1, zb1) - max(za0, zb0))
    inter = inter_area * dz
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: dict(DEFAULT_IOU_THRESHOLDS))
    geometry: str = "bev"            # "bev" | "3d"
    distance_buckets: tuple = DISTANCE_BUCKETS

    def iou_fn(self):
        if self.geometry == "bev":
            return iou_bev
        if self.geometry == "3d":
            return iou_3d
        raise ValueError(f"geometry must be bev or 3d, got {self.geometry!r}")


@dataclass
class PRCurve:
    recalls: np.ndarray
    precisions: np.ndarray
    ap: float


@dataclass
class ClassBucketResult:
    ap: float | None       # None when the bucket holds no ground truth
    aph: float | None
    n_gt: int
    n_det: int
    pr: PRCurve | None = None


def _interp_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """101-point interpolated area under the PR curve."""
    if len(recalls) == 0:
        return 0.0
    # p_interp(r) = max precision among samples with recall >= r
    order = np.argsort(recalls, kind="stable")
    rec = recalls[order]
    prec = precisions[order]
    best_from = np.maximum.accumulate(prec[::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    pos = np.searchsorted(rec, grid, side="left")
    vals = np.where(pos < len(rec), best_from[np.minimum(pos, len(rec) - 1)], 0.0)
    return float(vals.mean())


def _match_frame(dets, gts, thr: float, iou_fn):
    """Greedy per-frame matching; yields (score, tp, heading_weight)."""
    taken = [False] * len(gts)
    rows = []
    for d in sorted(dets, key=lambda d: -d.score):
        best, best_iou = -1, thr
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            v = iou_fn(d.box, g.box if hasattr(g, "box") else g)
            if v >= best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
            gbox = gts[best].box if hasattr(gts[best], "box") else gts[best]
            herr = abs(float(wrap_angle(d.box.yaw - gbox.yaw)))
            rows.append((d.score, True, max(0.0, 1.0 - herr / np.pi)))
        else:
            rows.append((d.score, False, 0.0))
    return rows


def _range_of(box: Box7DoF) -> float:
    return float(np.linalg.norm(box.center))


def evaluate(dets_by_frame: dict, gts_by_frame: dict, cfg: EvalConfig | None = None) -> dict:
    """AP/APH per class and per distance bucket.

    dets_by_frame: frame id -> list of Detection.
    gts_by_frame:  frame id -> list of (class_name, Box7DoF).
    Returns {class: {bucket_label: ClassBucketResult}} with an "all"
    bucket plus one per configured distance interval.
    """
    cfg = cfg or EvalConfig()
    iou_fn = cfg.iou_fn()
    classes = sorted(
        {c for gts in gts_by_frame.values() for c, _ in gts}
        | {d.class_name for ds in dets_by_frame.values() for d in ds})
    frames = sorted(set(dets_by_frame) | set(gts_by_frame))
    buckets = (("all", 0.0, np.inf),) + tuple(cfg.distance_buckets)

    results: dict = {}
    for cname in classes:
        thr = cfg.iou_thresholds.get(cname, 0.5)
        results[cname] = {}
        for label, lo, hi in buckets:
            rows = []
            n_gt = n_det = 0
            for fid in frames:
                gts = [b for c, b in gts_by_frame.get(fid, []) if c == cname
                       and lo <= _range_of(b) < hi]
                dets = [d for d in dets_by_frame.get(fid, []) if d.class_name == cname
                        and lo <= _range_of(d.box) < hi]
                n_gt += len(gts)
                n_det += len(dets)
                rows.extend(_match_frame(dets, gts, thr, iou_fn))
            if n_gt == 0:
                results[cname][label] = ClassBucketResult(None, None, 0, n_det)
                continue
            rows.sort(key=lambda r: -r[0])
            tp = np.cumsum([1.0 if r[1] else 0.0 for r in rows])
            hw = np.cumsum([r[2] for r in rows])
            k = np.arange(1, len(rows) + 1)
            if len(rows):
                recalls = tp / n_gt
                precisions = tp / k
                ap = _interp_ap(recalls, precisions)
                aph = _interp_ap(hw / n_gt, hw / k)
                pr = PRCurve(recalls, precisions, ap)
            else:
                ap, aph = 0.0, 0.0
                pr = PRCurve(np.zeros(0), np.zeros(0), 0.0)
            results[cname][label] = ClassBucketResult(ap, aph, n_gt, n_det, pr)
    return results


# ---------------------------------------------------------------------------
# Reports


def format_report(results_by_geometry: dict) -> str:
    """Plain-text table: one section per geometry, rows per class/bucket."""
    lines = []
    for geom, results in results_by_geometry.items():
        lines.append(f"[{geom.upper()}]")
        lines.append(f"{'class':<12} {'bucket':<8} {'AP':>8} {'APH':>8} {'n_gt':>6} {'n_det':>6}")
        for cname in sorted(results):
            for label, r in results[cname].items():
                ap = "-" if r.ap is None else f"{r.ap:.4f}"
                aph = "-" if r.aph is None else f"{r.aph:.4f}"
                lines.append(f"{cname:<12} {label:<8} {ap:>8} {aph:>8} {r.n_gt:>6} {r.n_det:>6}")
        lines.append("")
    return "\n".join(lines)


def write_report_csv(path, results_by_geometry: dict) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["geometry", "class", "bucket", "ap", "aph", "n_gt", "n_det"])
        for geom, results in results_by_geometry.items():
            for cname in sorted(results):
                for label, r in results[cname].items():
                    w.writerow([
                        geom, cname, label,
                        "" if r.ap is None else f"{r.ap:.6f}",
                        "" if r.aph is None else f"{r.aph:.6f}",
                        r.n_gt, r.n_det])
