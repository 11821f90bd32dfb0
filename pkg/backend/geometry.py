"""
Box arithmetic: IoU, per-category NMS, regression deltas and the 16-value
pairwise spatial encoding.

Encoding layout for an ordered pair (a, b) in a W×H frame:

    [0:6]   a: cx/W, cy/H, w/W, h/H, wh/(WH), w/h
    [6:12]  b: same six values
    [12]    IoU(a, b)
    [13]    (cx_b − cx_a) / w_a
    [14]    (cy_b − cy_a) / h_a
    [15]    centre distance / frame diagonal
"""

import math
from collections.abc import Sequence

import numpy as np
from exceptions import GeometryError
from models import BoundingBox, Detection
from tensor import Tensor

ENCODING_SIZE = 16
# widest log-space size delta decode_deltas will apply
MAX_LOG_DELTA = math.log(1000.0 / 16)

BoxesLike = Sequence[BoundingBox] | np.ndarray


def boxes_to_array(boxes: BoxesLike) -> np.ndarray:
    """Stack boxes into an n×4 float array"""
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([box.as_list() for box in boxes], dtype=np.float64)


def iou_matrix(boxes_a: BoxesLike, boxes_b: BoxesLike) -> np.ndarray:
    """Pairwise IoU, |a|×|b|; zero-area unions give 0"""
    a, b = boxes_to_array(boxes_a), boxes_to_array(boxes_b)
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        overlap = np.where(union > 0, inter / union, 0.0)
    return overlap


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes, in [0, 1]"""
    return float(iou_matrix([a], [b])[0, 0])


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """
    Greedy non-maximum suppression within each (role, category).

    A detection is suppressed when its IoU with an already-kept detection of
    the same role and category is >= ``iou_threshold``. The result is sorted
    by descending score, ties kept in input order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    kept: list[int] = []
    groups: dict[tuple[str, int], list[int]] = {}
    for idx in order:
        det = detections[idx]
        group = groups.setdefault((det.role.value, det.category), [])
        if group:
            overlaps = iou_matrix([det.box], [detections[k].box for k in group])[0]
            if np.any(overlaps >= iou_threshold):
                continue
        group.append(idx)
        kept.append(idx)
    return [detections[i] for i in kept]


def _per_box_block(boxes: np.ndarray, frame_w: float, frame_h: float) -> np.ndarray:
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    return np.stack(
        [
            (boxes[:, 0] + boxes[:, 2]) / 2.0 / frame_w,
            (boxes[:, 1] + boxes[:, 3]) / 2.0 / frame_h,
            widths / frame_w,
            heights / frame_h,
            widths * heights / (frame_w * frame_h),
            widths / heights,
        ],
        axis=1,
    )


def encode_pair_array(
    boxes_a: BoxesLike, boxes_b: BoxesLike, frame_w: float, frame_h: float
) -> np.ndarray:
    """Spatial encoding of every (a, b) pair as a plain |a|×|b|×16 array"""
    a, b = boxes_to_array(boxes_a), boxes_to_array(boxes_b)
    if frame_w <= 0 or frame_h <= 0:
        msg = f"frame dimensions must be positive, got {frame_w}×{frame_h}"
        raise GeometryError(msg)
    for label, arr in (("first", a), ("second", b)):
        if np.any(arr[:, 2] - arr[:, 0] <= 0) or np.any(arr[:, 3] - arr[:, 1] <= 0):
            msg = f"spatial encoding needs positive-area boxes; a {label} box is degenerate"
            raise GeometryError(msg)

    n, m = len(a), len(b)
    encoding = np.empty((n, m, ENCODING_SIZE))
    encoding[:, :, 0:6] = _per_box_block(a, frame_w, frame_h)[:, None, :]
    encoding[:, :, 6:12] = _per_box_block(b, frame_w, frame_h)[None, :, :]
    encoding[:, :, 12] = iou_matrix(a, b)

    a_cx, a_cy = (a[:, 0] + a[:, 2]) / 2.0, (a[:, 1] + a[:, 3]) / 2.0
    b_cx, b_cy = (b[:, 0] + b[:, 2]) / 2.0, (b[:, 1] + b[:, 3]) / 2.0
    delta_x = b_cx[None, :] - a_cx[:, None]
    delta_y = b_cy[None, :] - a_cy[:, None]
    encoding[:, :, 13] = delta_x / (a[:, 2] - a[:, 0])[:, None]
    encoding[:, :, 14] = delta_y / (a[:, 3] - a[:, 1])[:, None]
    encoding[:, :, 15] = np.sqrt(delta_x**2 + delta_y**2) / math.hypot(frame_w, frame_h)
    return encoding


def spatial_encoding(
    a: BoundingBox, b: BoundingBox, frame_w: float, frame_h: float
) -> np.ndarray:
    """16-value encoding of the ordered pair (a, b); a is the reference box"""
    return encode_pair_array([a], [b], frame_w, frame_h)[0, 0]


def encode_pairs(
    boxes_a: BoxesLike, boxes_b: BoxesLike, frame_w: float, frame_h: float
) -> Tensor:
    """Batched spatial encoding over the Cartesian product, as a constant tensor"""
    return Tensor(encode_pair_array(boxes_a, boxes_b, frame_w, frame_h), op="encode_pairs")


def encode_deltas(proposals: BoxesLike, targets: BoxesLike) -> np.ndarray:
    """(dx, dy, dw, dh) that move each proposal onto its target box"""
    p, t = boxes_to_array(proposals), boxes_to_array(targets)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    tw, th = t[:, 2] - t[:, 0], t[:, 3] - t[:, 1]
    return np.stack(
        [
            ((t[:, 0] + t[:, 2]) / 2.0 - (p[:, 0] + p[:, 2]) / 2.0) / pw,
            ((t[:, 1] + t[:, 3]) / 2.0 - (p[:, 1] + p[:, 3]) / 2.0) / ph,
            np.log(tw / pw),
            np.log(th / ph),
        ],
        axis=1,
    )


def decode_deltas(proposals: BoxesLike, deltas: np.ndarray) -> np.ndarray:
    """Inverse of encode_deltas; size deltas are clamped to avoid overflow"""
    p = boxes_to_array(proposals)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    cx = (p[:, 0] + p[:, 2]) / 2.0 + deltas[:, 0] * pw
    cy = (p[:, 1] + p[:, 3]) / 2.0 + deltas[:, 1] * ph
    w = pw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_DELTA))
    h = ph * np.exp(np.minimum(deltas[:, 3], MAX_LOG_DELTA))
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def clip_boxes(boxes: np.ndarray, frame_w: float, frame_h: float) -> np.ndarray:
    clipped = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    clipped[:, [0, 2]] = np.clip(clipped[:, [0, 2]], 0.0, frame_w)
    clipped[:, [1, 3]] = np.clip(clipped[:, [1, 3]], 0.0, frame_h)
    clipped[:, 2] = np.maximum(clipped[:, 2], clipped[:, 0])
    clipped[:, 3] = np.maximum(clipped[:, 3], clipped[:, 1])
    return clipped
