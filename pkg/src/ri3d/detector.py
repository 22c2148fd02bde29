"""Anchor-free per-pixel detection head: targets, losses, decoding, NMS.

Classification targets are Gaussian balls around box centers, normalized
per box by the highest score among the valid pixels inside that box, so
every box containing at least one valid pixel gets a pixel with target
exactly 1.0 (3D points are sparse; the pixel nearest a center can be far
from it). Regression targets are 8 values for the 7 box degrees of
freedom: displacement to the center, absolute extents, and yaw split
into sine/cosine to avoid the wrap discontinuity.

Losses: penalty-reduced focal loss on sigmoid class scores and L1 on the
regression, averaged over valid pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import Box7DoF, points_in_box, wrap_angle
from .metrics import iou_bev
from .tensor import Tensor

__all__ = [
    "DEFAULT_SIGMAS", "TargetMap", "Detection",
    "make_cls_targets", "make_reg_targets", "build_targets",
    "focal_loss", "reg_loss", "detection_loss",
    "decode", "nms_bev", "write_detections", "read_detections",
]

#: Gaussian target standard deviations, meters.
DEFAULT_SIGMAS = {"pedestrian": 0.25, "vehicle": 0.5}

FOCAL_ALPHA = 2.0
FOCAL_BETA = 4.0
_LOG_EPS = 1e-12


@dataclass
class TargetMap:
    """Per-pixel training targets at the head's resolution (flattened)."""

    cls: np.ndarray        # [N, C] foreground class scores in [0, 1]
    reg: np.ndarray        # [N, 8]
    reg_valid: np.ndarray  # [N] bool: valid pixel inside some box
    box_index: np.ndarray  # [N] int: which box the regression points at, -1 none

    def cls_with_background(self) -> np.ndarray:
        """[N, C+1] with channel 0 = 1 - max over foreground classes."""
        bg = 1.0 - (self.cls.max(axis=1) if self.cls.shape[1] else np.zeros(len(self.cls)))
        return np.concatenate([bg[:, None], self.cls], axis=1)


@dataclass
class Detection:
    box: Box7DoF
    class_name: str
    score: float


def _scores_and_inside(points: np.ndarray, valid: np.ndarray, boxes,
                       sigmas: dict) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalized Gaussian score and inside-test per (pixel, box)."""
    n = len(points)
    j = len(boxes)
    s = np.zeros((n, j))
    inside = np.zeros((n, j), dtype=bool)
    for jj, (cls, box) in enumerate(boxes):
        sigma = sigmas.get(cls, 0.5)
        d2 = ((points - box.center) ** 2).sum(axis=1)
        s[:, jj] = np.exp(-d2 / (2.0 * sigma * sigma))
        inside[:, jj] = points_in_box(points, box) & valid
    s[~valid] = 0.0
    return s, inside


def build_targets(points: np.ndarray, valid: np.ndarray, boxes,
                  class_names, sigmas: dict | None = None) -> TargetMap:
    """Classification and regression targets in one pass.

    points: [N, 3] world positions of head pixels; valid: [N] mask;
    boxes: iterable of (class_name, Box7DoF); class_names: ordered
    foreground class list defining channel order.
    """
    sigmas = DEFAULT_SIGMAS if sigmas is None else sigmas
    boxes = list(boxes)
    n = len(points)
    c = len(class_names)
    cls_map = np.zeros((n, c))
    reg = np.zeros((n, 8))
    reg_valid = np.zeros(n, dtype=bool)
    box_index = np.full(n, -1, dtype=np.int64)
    if not boxes:
        return TargetMap(cls_map, reg, reg_valid, box_index)

    s, inside = _scores_and_inside(points, valid, boxes, sigmas)

    # normalize per box by the best score among valid pixels inside it;
    # boxes without any inside pixel keep their (tiny) raw tails
    shat = s.copy()
    for jj in range(len(boxes)):
        hits = inside[:, jj]
        if hits.any():
            shat[:, jj] = s[:, jj] / s[hits, jj].max()
    shat = np.minimum(shat, 1.0)

    name_to_ch = {name: i for i, name in enumerate(class_names)}
    for jj, (cname, _) in enumerate(boxes):
        ch = name_to_ch.get(cname)
        if ch is None:
            continue
        cls_map[:, ch] = np.maximum(cls_map[:, ch], shat[:, jj])
    cls_map[~valid] = 0.0

    # regression: per pixel, the containing box with the highest raw
    # Gaussian score; exact ties go to the lower box index
    masked = np.where(inside, s, -1.0)
    best = np.argmax(masked, axis=1)
    reg_valid = inside.any(axis=1)
    box_index[reg_valid] = best[reg_valid]
    for jj, (_, box) in enumerate(boxes):
        rows = box_index == jj
        if not rows.any():
            continue
        reg[rows, 0:3] = box.center - points[rows]
        reg[rows, 3:6] = (box.length, box.width, box.height)
        reg[rows, 6] = np.sin(box.yaw)
        reg[rows, 7] = np.cos(box.yaw)
    return TargetMap(cls_map, reg, reg_valid, box_index)


def make_cls_targets(points, valid, boxes, class_names, sigmas=None) -> np.ndarray:
    """[N, C] Gaussian-ball score map (see build_targets)."""
    return build_targets(points, valid, boxes, class_names, sigmas).cls


def make_reg_targets(points, valid, boxes, class_names, sigmas=None):
    """([N, 8] targets, [N] valid flags) for pixels inside some box."""
    t = build_targets(points, valid, boxes, class_names, sigmas)
    return t.reg, t.reg_valid


# ---------------------------------------------------------------------------
# Losses


def focal_loss(cls_logits: Tensor, target: np.ndarray, valid: np.ndarray) -> Tensor:
    """Penalty-reduced focal loss on sigmoid scores, mean over valid
    pixels and channels.

    Pixels with target exactly 1 use (1-p)^alpha * log p; everything
    else uses (1-y)^beta * p^alpha * log(1-p). Logs are stabilized with
    a 1e-12 epsilon so any finite logits give a finite loss.
    """
    target = np.asarray(target, dtype=np.float64)
    vmask = np.asarray(valid, dtype=bool)
    if target.shape != cls_logits.shape:
        raise T.ShapeError(f"target shape {target.shape} != logits {cls_logits.shape}")
    pos = (target == 1.0) & vmask[:, None]
    negw = np.where(~pos & vmask[:, None], (1.0 - target) ** FOCAL_BETA, 0.0)

    p = T.sigmoid(cls_logits)
    one_minus_p = T.sub(1.0, p)
    pos_term = T.mul(pos.astype(np.float64),
                     T.mul(T.mul(one_minus_p, one_minus_p), T.log(T.add(p, _LOG_EPS))))
    neg_term = T.mul(negw, T.mul(T.mul(p, p), T.log(T.add(one_minus_p, _LOG_EPS))))
    denom = max(int(vmask.sum()), 1) * target.shape[1]
    return T.mul(T.add(pos_term.sum(), neg_term.sum()), -1.0 / denom)


def reg_loss(reg_pred: Tensor, target: np.ndarray, reg_valid: np.ndarray) -> Tensor:
    """Mean absolute error over regression-valid pixels and 8 channels."""
    target = np.asarray(target, dtype=np.float64)
    vmask = np.asarray(reg_valid, dtype=bool)
    count = int(vmask.sum())
    if count == 0:
        return Tensor(0.0)
    diff = T.absolute(T.sub(reg_pred, target))
    gated = T.mul(diff, vmask[:, None].astype(np.float64))
    return T.mul(gated.sum(), 1.0 / (count * target.shape[1]))


def detection_loss(cls_logits: Tensor, reg_pred: Tensor, targets: TargetMap,
                   valid: np.ndarray, reg_weight: float = 1.0):
    """(total, cls, reg) losses for one frame."""
    lc = focal_loss(cls_logits, targets.cls_with_background(), valid)
    lr = reg_loss(reg_pred, targets.reg, targets.reg_valid)
    return T.add(lc, T.mul(lr, reg_weight)), lc, lr


# ---------------------------------------------------------------------------
# Decoding and duplicate suppression


def decode(cls_logits: np.ndarray, reg: np.ndarray, points: np.ndarray,
           valid: np.ndarray, class_names, score_threshold: float = 0.1,
           min_extent: float = 1e-3) -> list:
    """Turn per-pixel head outputs into Detections.

    Channel 0 of the logits is background and never emits. Each valid
    pixel whose foreground sigmoid score exceeds the threshold becomes a
    box at (pixel position + predicted displacement) with the predicted
    absolute extents (clamped positive) and yaw = atan2(sin, cos).
    """
    cls_logits = np.asarray(cls_logits)
    reg = np.asarray(reg)
    probs = 1.0 / (1.0 + np.exp(-cls_logits[:, 1:]))
    dets = []
    for ch, cname in enumerate(class_names):
        rows = np.nonzero(valid & (probs[:, ch] > score_threshold))[0]
        for i in rows:
            center = points[i] + reg[i, 0:3]
            l, w, h = np.maximum(reg[i, 3:6], min_extent)
            yaw = float(wrap_angle(np.arctan2(reg[i, 6], reg[i, 7])))
            dets.append(Detection(Box7DoF(center, l, w, h, yaw), cname, float(probs[i, ch])))
    return dets


def nms_bev(dets, iou_threshold: float = 0.5) -> list:
    """Greedy suppression by descending score using top-down box overlap."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list = []
    for i in order:
        d = dets[i]
        if any(k.class_name == d.class_name and iou_bev(k.box, d.box) > iou_threshold
               for k in kept):
            continue
        kept.append(d)
    return kept


# ---------------------------------------------------------------------------
# Detections file: "frame class cx cy cz l w h yaw score" per line


def write_detections(path, dets_by_frame: dict) -> None:
    with open(path, "w") as f:
        for frame_id in sorted(dets_by_frame):
            for d in dets_by_frame[frame_id]:
                vals = " ".join(format(v, ".17g") for v in d.box.as_array())
                f.write(f"{frame_id} {d.class_name} {vals} {d.score:.17g}\n")


def read_detections(path) -> dict:
    out: dict = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 10:
                raise ValueError(f"detection line needs 10 fields: {line!r}")
            frame, cname = parts[0], parts[1]
            nums = [float(v) for v in parts[2:]]
            det = Detection(Box7DoF.from_array(nums[:7]), cname, nums[7])
            out.setdefault(frame, []).append(det)
    return out
