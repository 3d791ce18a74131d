"""Axis-aligned box arithmetic in grid units: IoU, greedy NMS, delta-based
refinement, and the 12-dimensional pairwise spatial relation vector."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    """Center/size representation. Area is available as `.area`."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box sides must be positive, got w={self.w}, h={self.h}")

    @property
    def area(self):
        return self.w * self.h

    def corners(self):
        """(x1, y1, x2, y2) extents."""
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)


def iou(a, b):
    """Intersection area over union area; 0 for disjoint boxes."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def boxes_to_array(boxes):
    """Stack boxes as an (n, 4) corner array for vectorized overlap tests."""
    return np.array([b.corners() for b in boxes], dtype=np.float64).reshape(-1, 4)


def _iou_one_vs_many(corners, idx, others):
    x1 = np.maximum(corners[idx, 0], corners[others, 0])
    y1 = np.maximum(corners[idx, 1], corners[others, 1])
    x2 = np.minimum(corners[idx, 2], corners[others, 2])
    y2 = np.minimum(corners[idx, 3], corners[others, 3])
    inter = np.maximum(0.0, x2 - x1) * np.maximum(0.0, y2 - y1)
    areas = (corners[:, 2] - corners[:, 0]) * (corners[:, 3] - corners[:, 1])
    return inter / (areas[idx] + areas[others] - inter)


def nms(boxes, scores, iou_thresh, max_keep):
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box (score ties go to the
    lower index) and discards boxes whose IoU with it exceeds iou_thresh.
    Returns kept indices in descending-score order, at most max_keep of them.
    """
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes but {len(scores)} scores")
    if not (0.0 < iou_thresh < 1.0):
        raise ValueError(f"nms: iou_thresh must be in (0,1), got {iou_thresh}")
    if max_keep < 1:
        raise ValueError("nms: max_keep must be >= 1")
    if not boxes:
        return []

    corners = boxes_to_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    # stable sort on -score keeps the lower index first among ties
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size > 0 and len(keep) < max_keep:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        if rest.size == 0:
            break
        overlaps = _iou_one_vs_many(corners, i, rest)
        order = rest[overlaps <= iou_thresh]
    return keep


def spatial_relation(b_i, b_j):
    """12-vector describing how box i sits relative to box j.

    [w_i, h_i, s_i, w_j, h_j, s_j,
     (x_i-x_j)/w_j, (y_i-y_j)/h_j, (x_i-x_j)^2/w_j^2, (y_i-y_j)^2/h_j^2,
     log(w_i/w_j), log(h_i/h_j)]

    The first argument is the receiver, the second the sender.
    """
    if not (b_j.w > 0 and b_j.h > 0):
        raise ValueError("spatial_relation: reference box must have positive sides")
    dx = (b_i.cx - b_j.cx) / b_j.w
    dy = (b_i.cy - b_j.cy) / b_j.h
    return np.array([
        b_i.w, b_i.h, b_i.area,
        b_j.w, b_j.h, b_j.area,
        dx, dy, dx * dx, dy * dy,
        np.log(b_i.w / b_j.w), np.log(b_i.h / b_j.h),
    ], dtype=np.float64)


def apply_deltas(b, d):
    """Refine a box by (dx, dy, dw, dh): shift center by fractions of the
    size, rescale sides by exp of the log-deltas."""
    d = np.asarray(d, dtype=np.float64)
    return Box(b.cx + d[0] * b.w, b.cy + d[1] * b.h,
               b.w * np.exp(d[2]), b.h * np.exp(d[3]))


def encode_deltas(b, g):
    """Exact inverse of apply_deltas in its second argument: the deltas that
    map box b onto box g."""
    return np.array([
        (g.cx - b.cx) / b.w,
        (g.cy - b.cy) / b.h,
        np.log(g.w / b.w),
        np.log(g.h / b.h),
    ], dtype=np.float64)


def clip_box(b, width, height, min_side=1e-6):
    """Clamp a box's extents into [0, width] x [0, height], keeping sides
    positive even when the box started fully outside."""
    x1, y1, x2, y2 = b.corners()
    x1, x2 = max(0.0, min(x1, width)), max(0.0, min(x2, width))
    y1, y2 = max(0.0, min(y1, height)), max(0.0, min(y2, height))
    w = max(x2 - x1, min_side)
    h = max(y2 - y1, min_side)
    return Box((x1 + x2) / 2.0, (y1 + y2) / 2.0, w, h)
