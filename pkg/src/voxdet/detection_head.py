"""Anchor-based single-class detection: anchors, box codec, losses, NMS.

Anchors tile the bird's-eye feature map, one per (pixel, yaw).  Box
regression uses normalized deltas relative to the matched anchor; the
codec ships in two conventions (see encode_box).  Classification is a
sigmoid focal loss over positive/negative anchors with ignored ones
excluded.
"""

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import engine
from .engine import Tensor
from .geometry import Box3D, normalize_angle, rotated_iou_bev
from .voxelizer import GridConfig

ANCHOR_DIMS = (3.9, 1.6, 1.56)
ANCHOR_Z_CENTER = -1.0
ANCHOR_YAWS = (0.0, math.pi / 2)
POSITIVE_IOU = 0.6
NEGATIVE_IOU = 0.45
NMS_IOU_DEFAULT = 0.1

POSITIVE = 1
NEGATIVE = 0
IGNORED = -1

# delta conventions: "printed" divides dy by anchor height and dz by the
# base diagonal with anchor-minus-gt centers; "lineage" is the usual
# gt-minus-anchor with dz over anchor height.
CONVENTION_PRINTED = "printed"
CONVENTION_LINEAGE = "lineage"


def generate_anchors(feature_shape: tuple[int, int], grid: GridConfig,
                     dims: tuple[float, float, float] = ANCHOR_DIMS,
                     yaws: Sequence[float] = ANCHOR_YAWS,
                     z_center: float = ANCHOR_Z_CENTER) -> np.ndarray:
    """One anchor per (pixel, yaw) at the pixel's BEV center.

    Returns (H*W*len(yaws), 7) rows (cx, cy, cz, l, w, h, yaw), ordered
    row-major over pixels with yaw fastest, matching the head's map layout.
    """
    h, w = feature_shape
    pitch_x = (grid.range_max[0] - grid.range_min[0]) / w
    pitch_y = (grid.range_max[1] - grid.range_min[1]) / h
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    cx = grid.range_min[0] + (cols.ravel() + 0.5) * pitch_x
    cy = grid.range_min[1] + (rows.ravel() + 0.5) * pitch_y

    n_yaw = len(yaws)
    anchors = np.empty((h * w * n_yaw, 7), dtype=np.float64)
    for j, yaw in enumerate(yaws):
        block = anchors[j::n_yaw]
        block[:, 0] = cx
        block[:, 1] = cy
        block[:, 2] = z_center
        block[:, 3:6] = dims
        block[:, 6] = yaw
    return anchors


def flatten_cls_map(cls_map: Tensor) -> Tensor:
    """(n_yaw, H, W) logits -> (A,) in generate_anchors order."""
    n_yaw, h, w = cls_map.data.shape
    return engine.reshape(engine.transpose(cls_map, (1, 2, 0)), (h * w * n_yaw,))


def flatten_reg_map(reg_map: Tensor) -> Tensor:
    """(n_yaw*7, H, W) deltas -> (A, 7) in generate_anchors order."""
    c, h, w = reg_map.data.shape
    if c % 7:
        raise ValueError("regression map channels must be a multiple of 7")
    n_yaw = c // 7
    split = engine.reshape(reg_map, (n_yaw, 7, h, w))
    return engine.reshape(engine.transpose(split, (2, 3, 0, 1)), (h * w * n_yaw, 7))


def encode_box(anchor: Box3D, gt: Box3D,
               convention: str = CONVENTION_PRINTED) -> np.ndarray:
    """Seven deltas (dx, dy, dz, dl, dw, dh, dyaw) for gt relative to anchor."""
    d_a = math.hypot(anchor.l, anchor.w)
    if convention == CONVENTION_PRINTED:
        dx = (anchor.cx - gt.cx) / d_a
        dy = (anchor.cy - gt.cy) / anchor.h
        dz = (anchor.cz - gt.cz) / d_a
    elif convention == CONVENTION_LINEAGE:
        dx = (gt.cx - anchor.cx) / d_a
        dy = (gt.cy - anchor.cy) / d_a
        dz = (gt.cz - anchor.cz) / anchor.h
    else:
        raise ValueError(f"unknown codec convention {convention!r}")
    return np.array([
        dx, dy, dz,
        math.log(gt.l / anchor.l),
        math.log(gt.w / anchor.w),
        math.log(gt.h / anchor.h),
        gt.yaw - anchor.yaw,
    ])


def decode_box(anchor: Box3D, deltas,
               convention: str = CONVENTION_PRINTED) -> Box3D:
    """Exact inverse of encode_box; yaw renormalized to [-pi, pi)."""
    dx, dy, dz, dl, dw, dh, dyaw = (float(v) for v in deltas)
    d_a = math.hypot(anchor.l, anchor.w)
    if convention == CONVENTION_PRINTED:
        cx = anchor.cx - dx * d_a
        cy = anchor.cy - dy * anchor.h
        cz = anchor.cz - dz * d_a
    elif convention == CONVENTION_LINEAGE:
        cx = anchor.cx + dx * d_a
        cy = anchor.cy + dy * d_a
        cz = anchor.cz + dz * anchor.h
    else:
        raise ValueError(f"unknown codec convention {convention!r}")
    return Box3D(cx, cy, cz,
                 anchor.l * math.exp(dl),
                 anchor.w * math.exp(dw),
                 anchor.h * math.exp(dh),
                 normalize_angle(anchor.yaw + dyaw))


def _maybe_iou(a: Box3D, b: Box3D) -> float:
    # circumcircle gate: disjoint circles mean disjoint rectangles
    reach = (math.hypot(a.l, a.w) + math.hypot(b.l, b.w)) / 2.0
    if (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 > reach * reach:
        return 0.0
    return rotated_iou_bev(a, b)


@dataclass(frozen=True)
class TargetAssignment:
    """Per-anchor labels, matched box index, and encoded regression targets."""

    labels: np.ndarray      # (A,) ints: POSITIVE / NEGATIVE / IGNORED
    matched_gt: np.ndarray  # (A,) int64, -1 where not positive
    deltas: np.ndarray      # (A, 7), zero rows where not positive

    @property
    def num_positive(self) -> int:
        return int((self.labels == POSITIVE).sum())


def assign_targets(anchors: np.ndarray, gts: Sequence[Box3D],
                   pos_iou: float = POSITIVE_IOU, neg_iou: float = NEGATIVE_IOU,
                   convention: str = CONVENTION_PRINTED) -> TargetAssignment:
    """Label anchors against ground truth by rotated BEV IoU.

    An anchor is positive when its best IoU reaches pos_iou, negative when
    below neg_iou, ignored between.  Each box additionally forces its
    highest-IoU anchor positive (if that IoU is nonzero) so no box goes
    unclaimed; boxes are processed in order and a later box may retarget
    an anchor forced by an earlier one, but never one already positive by
    threshold.
    """
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 7), dtype=np.float64)
    if not gts:
        return TargetAssignment(labels, matched, deltas)

    anchor_boxes = [Box3D(*row) for row in anchors]
    iou = np.zeros((n, len(gts)), dtype=np.float64)
    for a, abox in enumerate(anchor_boxes):
        for g, gbox in enumerate(gts):
            iou[a, g] = _maybe_iou(abox, gbox)

    best_iou = iou.max(axis=1)
    best_gt = iou.argmax(axis=1)
    labels[:] = IGNORED
    labels[best_iou < neg_iou] = NEGATIVE
    threshold_pos = best_iou >= pos_iou
    labels[threshold_pos] = POSITIVE
    matched[threshold_pos] = best_gt[threshold_pos]

    for g in range(len(gts)):
        a = int(iou[:, g].argmax())
        if iou[a, g] > 0.0 and not threshold_pos[a]:
            labels[a] = POSITIVE
            matched[a] = g

    for a in np.flatnonzero(labels == POSITIVE):
        deltas[a] = encode_box(anchor_boxes[a], gts[matched[a]], convention)
    return TargetAssignment(labels, matched, deltas)


def focal_loss(logits: Tensor, labels: np.ndarray,
               alpha: float | None = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss normalized by positive count (floor 1).

    alpha weights positives, 1 - alpha weights negatives; pass None for
    unweighted.  Ignored anchors contribute nothing.
    """
    labels = np.asarray(labels)
    if logits.data.shape != labels.shape:
        raise ValueError("logits and labels must align")
    alpha_pos = 1.0 if alpha is None else float(alpha)
    alpha_neg = 1.0 if alpha is None else 1.0 - float(alpha)
    norm = max(1, int((labels == POSITIVE).sum()))
    coeff_pos = (labels == POSITIVE) * (alpha_pos / norm)
    coeff_neg = (labels == NEGATIVE) * (alpha_neg / norm)

    neg_logits = engine.neg(logits)
    # -log p = softplus(-x); the (1 - p_t) modulator is sigmoid of the
    # opposite-sign logit
    pos_term = engine.mul(engine.pow_const(engine.sigmoid(neg_logits), gamma),
                          engine.softplus(neg_logits))
    neg_term = engine.mul(engine.pow_const(engine.sigmoid(logits), gamma),
                          engine.softplus(logits))
    weighted = engine.add(engine.mul(pos_term, Tensor(coeff_pos)),
                          engine.mul(neg_term, Tensor(coeff_neg)))
    return engine.tsum(weighted)


def smooth_l1_loss(pred_deltas: Tensor, assignment: TargetAssignment) -> Tensor:
    """Huber (transition 1.0) summed over the 7 dims, averaged over positives."""
    if pred_deltas.data.shape != assignment.deltas.shape:
        raise ValueError("prediction and target shapes differ")
    n_pos = assignment.num_positive
    if n_pos == 0:
        return Tensor(np.float64(0.0))
    mask = (assignment.labels == POSITIVE).astype(np.float64)[:, None] / n_pos
    diff = pred_deltas - Tensor(assignment.deltas)
    return engine.tsum(engine.mul(engine.smooth_l1(diff, beta=1.0), Tensor(mask)))


def cfg_total_loss(bbox_loss: Tensor, cls_loss: Tensor) -> Tensor:
    return engine.add(bbox_loss, cls_loss)


def associate_total_loss(bbox_loss: Tensor, cls_loss: Tensor,
                         assoc_loss: Tensor, sigma: float = 0.5) -> Tensor:
    weighted = engine.mul(assoc_loss, Tensor(np.float64(sigma)))
    return engine.add(engine.add(bbox_loss, cls_loss), weighted)


def nms_bev(boxes: Sequence[Box3D] | np.ndarray, scores,
            iou_threshold: float = NMS_IOU_DEFAULT) -> np.ndarray:
    """Greedy rotated-BEV suppression; returns kept indices, best first.

    A box is dropped when its IoU with an already kept box exceeds the
    threshold.  Score ties break toward the lower index.
    """
    boxes = [b if isinstance(b, Box3D) else Box3D(*b) for b in boxes]
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must align")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    for i in order:
        if all(_maybe_iou(boxes[i], boxes[k]) <= iou_threshold for k in kept):
            kept.append(int(i))
    return np.asarray(kept, dtype=np.int64)


def write_detections(path, boxes: Sequence[Box3D], scores) -> None:
    """One line per detection: cx cy cz l w h yaw score."""
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must align")
    lines = []
    for box, score in zip(boxes, scores):
        fields = list(box.as_array()) + [score]
        lines.append(" ".join(repr(float(v)) for v in fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path) -> tuple[list[Box3D], np.ndarray]:
    boxes: list[Box3D] = []
    scores: list[float] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if len(parts) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            values = [float(p) for p in parts]
            boxes.append(Box3D.from_array(values[:7]))
            scores.append(values[7])
    return boxes, np.asarray(scores, dtype=np.float64)
