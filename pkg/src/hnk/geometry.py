"""
Box algebra: IoU, the anchor offset codec and greedy non-maximum suppression.

Anchor cell coordinates (c_x, c_y) are the top-left corner of the owning grid cell, in grid units of
the anchor's level. The sigmoid of the raw offset places the decoded center inside that cell.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from .exception import HnkExceptBadOptions, HnkExceptDegeneratePrediction, HnkExceptNonFinite

# Beyond this |r_w| or |r_h| the exponential of the size code is treated as degenerate
MAX_SIZE_CODE = 40.0


class Box(NamedTuple):
    """Axis-aligned box in image pixels, corner form"""
    x1: float
    y1: float
    x2: float
    y2: float
    label: int = 0

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def to_center(self) -> tuple[float, float, float, float]:
        return (self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2, self.w, self.h

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float, label: int = 0) -> Box:
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, label)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


class RawPrediction(NamedTuple):
    r_x: float
    r_y: float
    r_w: float
    r_h: float


class AnchorRef(NamedTuple):
    c_x: float
    c_y: float
    c_w: float
    c_h: float
    level: int
    stride: int


def _sigmoid(value: float) -> float:
    if value >= 0:
        return 1.0 / (1.0 + math.exp(-value))
    z = math.exp(value)
    return z / (1.0 + z)


def iou(a: Box, b: Box) -> float:
    inter_w = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    inter_h = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = inter_w * inter_h
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([[b.x1, b.y1, b.x2, b.y2] for b in boxes], dtype=np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form box arrays (N, 4) and (M, 4), shape (N, M)"""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    inter_w = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    inter_h = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = inter_w * inter_h
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def decode(r: RawPrediction, a: AnchorRef) -> Box:
    if not all(math.isfinite(v) for v in r):
        raise HnkExceptNonFinite(f"decode: raw prediction {tuple(r)} is not finite")
    if abs(r.r_w) > MAX_SIZE_CODE or abs(r.r_h) > MAX_SIZE_CODE:
        raise HnkExceptDegeneratePrediction(
            f"decode: size code ({r.r_w}, {r.r_h}) exceeds +-{MAX_SIZE_CODE}, exponent would overflow")
    cx = (_sigmoid(r.r_x) + a.c_x) * a.stride
    cy = (_sigmoid(r.r_y) + a.c_y) * a.stride
    w = a.c_w * math.exp(r.r_w) * a.stride
    h = a.c_h * math.exp(r.r_h) * a.stride
    return Box.from_center(cx, cy, w, h)


def decode_array(raw: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """
    Vectorised decode. raw is (N, 4) offsets, anchors is (N, 5) rows of (c_x, c_y, c_w, c_h, stride).
    Returns corner-form boxes (N, 4)
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise HnkExceptNonFinite("decode: raw predictions are not finite")
    if raw.size and np.max(np.abs(raw[:, 2:4])) > MAX_SIZE_CODE:
        raise HnkExceptDegeneratePrediction(f"decode: a size code exceeds +-{MAX_SIZE_CODE}")
    z = np.exp(-np.abs(raw[:, :2]))
    offsets = np.where(raw[:, :2] >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    stride = anchors[:, 4]
    cx = (offsets[:, 0] + anchors[:, 0]) * stride
    cy = (offsets[:, 1] + anchors[:, 1]) * stride
    w = anchors[:, 2] * np.exp(raw[:, 2]) * stride
    h = anchors[:, 3] * np.exp(raw[:, 3]) * stride
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode(gt: Box, a: AnchorRef) -> RawPrediction:
    cx, cy, w, h = gt.to_center()
    if w <= 0 or h <= 0:
        raise HnkExceptBadOptions(f"encode: ground truth {tuple(gt[:4])} has no area")
    offset_x = cx / a.stride - a.c_x
    offset_y = cy / a.stride - a.c_y
    if not (0.0 < offset_x < 1.0 and 0.0 < offset_y < 1.0):
        raise HnkExceptBadOptions(
            f"encode: anchor cell does not own this ground truth, center offset ({offset_x}, {offset_y}) "
            f"of cell ({a.c_x}, {a.c_y}) at level {a.level}")
    return RawPrediction(
        math.log(offset_x / (1.0 - offset_x)),
        math.log(offset_y / (1.0 - offset_y)),
        math.log(w / (a.stride * a.c_w)),
        math.log(h / (a.stride * a.c_h)),
    )


def encode_targets(gts: np.ndarray, anchors: np.ndarray, edge_margin: float = 1e-3) -> np.ndarray:
    """
    Vectorised encode of matched pairs: gts (P, 4) corner boxes, anchors (P, 5) rows of
    (c_x, c_y, c_w, c_h, stride). Centers sitting on a cell edge are moved edge_margin inside the cell.
    """
    stride = anchors[:, 4]
    cx = (gts[:, 0] + gts[:, 2]) / 2
    cy = (gts[:, 1] + gts[:, 3]) / 2
    w = gts[:, 2] - gts[:, 0]
    h = gts[:, 3] - gts[:, 1]
    offset_x = cx / stride - anchors[:, 0]
    offset_y = cy / stride - anchors[:, 1]
    if np.any((offset_x < 0) | (offset_x >= 1) | (offset_y < 0) | (offset_y >= 1)):
        raise HnkExceptBadOptions("encode: anchor cell does not own this ground truth")
    if np.any(w <= 0) or np.any(h <= 0):
        raise HnkExceptBadOptions("encode: ground truth has no area")
    offset_x = np.clip(offset_x, edge_margin, 1.0 - edge_margin)
    offset_y = np.clip(offset_y, edge_margin, 1.0 - edge_margin)
    return np.stack([np.log(offset_x / (1.0 - offset_x)), np.log(offset_y / (1.0 - offset_y)),
                     np.log(w / (stride * anchors[:, 2])), np.log(h / (stride * anchors[:, 3]))], axis=1)


def nms(boxes: Sequence[Box], scores: Sequence[float], iou_threshold: float) -> list[int]:
    """
    Greedy suppression in descending score order, equal scores by ascending input index.
    A box is dropped iff its IoU with an already kept box exceeds iou_threshold.
    """
    if len(boxes) != len(scores):
        raise HnkExceptBadOptions(f"nms: {len(boxes)} boxes but {len(scores)} scores")
    if not boxes:
        return []
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise HnkExceptNonFinite("nms: scores must be finite")
    order = np.lexsort((np.arange(len(scores)), -scores))
    overlaps = iou_matrix(boxes_to_array(boxes), boxes_to_array(boxes))
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for index in order:
        if suppressed[index]:
            continue
        keep.append(int(index))
        suppressed |= overlaps[index] > iou_threshold
    return keep
