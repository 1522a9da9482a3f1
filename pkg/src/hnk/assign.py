"""
Per-anchor positive / negative / ignore labels against ground-truth boxes.

An anchor may only be positive for a ground truth whose center lies in the anchor's grid cell, so that
every positive has a valid regression target. Small ground truths (area <= 100 px^2) use a 0.25 IoU
threshold, the others 0.5. Each ground truth additionally forces its best free owning anchor positive,
overriding threshold matches, so it keeps a positive even when a larger box shares its cell.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .anchors import AnchorGrid
from .geometry import Box, boxes_to_array, iou_matrix

NEGATIVE = -1
IGNORE = -2

NEGATIVE_FLOOR = 0.25
SMALL_AREA = 100.0


class Assignment:
    def __init__(self, labels: np.ndarray, max_iou: np.ndarray):
        # gt index for positives, NEGATIVE or IGNORE otherwise
        self.labels = labels
        self.max_iou = max_iou

    def __len__(self):
        return self.labels.shape[0]

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def negative(self) -> np.ndarray:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> np.ndarray:
        return self.labels == IGNORE

    @property
    def num_positive(self) -> int:
        return int(np.sum(self.positive))

    def label(self, index: int) -> str:
        value = int(self.labels[index])
        if value >= 0:
            return f"positive({value})"
        return "negative" if value == NEGATIVE else "ignore"


def ownership(cell_boxes: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(N, M) mask: gt center lies in the anchor's cell, half-open on the far edges"""
    cx = (gts[:, 0] + gts[:, 2]) / 2
    cy = (gts[:, 1] + gts[:, 3]) / 2
    return ((cell_boxes[:, None, 0] <= cx[None, :]) & (cx[None, :] < cell_boxes[:, None, 2]) &
            (cell_boxes[:, None, 1] <= cy[None, :]) & (cy[None, :] < cell_boxes[:, None, 3]))


def forced_matches(overlaps: np.ndarray, owns: np.ndarray) -> dict[int, int]:
    """
    One forced anchor per ground truth, anchor -> gt. Each gt walks its owned anchors from best to worst IoU
    (lower anchor index on ties); an anchor wanted by two gts stays with the higher IoU, lower gt index on
    ties, and the other gt moves on to its next choice.
    """
    preferences = []
    for gt in range(overlaps.shape[1]):
        owned = np.flatnonzero(owns[:, gt] & (overlaps[:, gt] > 0.0))
        preferences.append(owned[np.argsort(-overlaps[owned, gt], kind="stable")])

    forced: dict[int, int] = {}
    next_choice = [0] * len(preferences)
    pending = list(range(len(preferences)))
    while pending:
        gt = pending.pop()
        if next_choice[gt] >= len(preferences[gt]):
            # no owned anchor left with a positive overlap
            continue
        anchor = int(preferences[gt][next_choice[gt]])
        next_choice[gt] += 1
        holder = forced.get(anchor)
        if holder is None:
            forced[anchor] = gt
        elif (overlaps[anchor, gt], -gt) > (overlaps[anchor, holder], -holder):
            forced[anchor] = gt
            pending.append(holder)
        else:
            pending.append(gt)
    return forced


def assign_arrays(anchor_boxes: np.ndarray, cell_boxes: np.ndarray, gts: np.ndarray) -> Assignment:
    n = anchor_boxes.shape[0]
    if gts.shape[0] == 0:
        return Assignment(np.full(n, NEGATIVE, dtype=np.int64), np.zeros(n))
    overlaps = iou_matrix(anchor_boxes, gts)
    owns = ownership(cell_boxes, gts)
    areas = (gts[:, 2] - gts[:, 0]) * (gts[:, 3] - gts[:, 1])
    thresholds = np.where(areas > SMALL_AREA, 0.5, 0.25)

    candidate = owns & (overlaps >= thresholds[None, :])
    candidate_overlaps = np.where(candidate, overlaps, -1.0)
    # argmax returns the lowest gt index among ties
    best_gt = np.argmax(candidate_overlaps, axis=1)
    is_positive = candidate.any(axis=1)
    max_iou = overlaps.max(axis=1)
    labels = np.where(max_iou < NEGATIVE_FLOOR, NEGATIVE, IGNORE)
    labels = np.where(is_positive, best_gt, labels).astype(np.int64)

    # forced matches override threshold positives
    for anchor, gt in forced_matches(overlaps, owns).items():
        labels[anchor] = gt
    return Assignment(labels, max_iou)


def assign(anchors: AnchorGrid, gts: Sequence[Box]) -> Assignment:
    return assign_arrays(anchors.boxes, anchors.cell_boxes, boxes_to_array(gts))
