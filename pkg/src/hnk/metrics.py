"""
Evaluation metrics: all-point AP at one IoU threshold, mAP50, recall, a pixel confusion matrix with
per-class IoU / mIoU / pixel accuracy, and lane accuracy (gt-lane pixel recall).
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .exception import HnkExceptBadConfig, HnkExceptBadOptions, HnkExceptShapeMismatch, HnkExceptUndefinedMetric
from .geometry import Box, boxes_to_array, iou_matrix
from .model import ModelParams, anchor_grid, predict
from .tensor import Tensor

SEG_CLASS_NAMES = ("background", "drivable", "lane")
LANE = 2

logger = logging.getLogger("debug_log")


@dataclass
class EvalConfig:
    conf_threshold: float = 0.001
    nms_threshold: float = 0.6
    iou_threshold: float = 0.5
    max_detections: int = 100

    def validate(self):
        for name in ("conf_threshold", "nms_threshold", "iou_threshold"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise HnkExceptBadConfig(f"eval.{name} must lie in [0, 1], got {value}")
        if self.max_detections < 1:
            raise HnkExceptBadConfig(f"eval.max_detections must be at least 1, got {self.max_detections}")


@dataclass
class DetResult:
    """Predictions of one image, (box, confidence) pairs, and its ground truths"""
    predictions: list[tuple[Box, float]] = field(default_factory=list)
    gts: list[Box] = field(default_factory=list)


class APResult(NamedTuple):
    # None when there is no ground truth at all
    ap: Optional[float]
    recall: Optional[float]
    num_gt: int
    num_tp: int


def _envelope_area(tp_flags: np.ndarray, num_gt: int) -> float:
    if tp_flags.size == 0:
        return 0.0
    tp = np.cumsum(tp_flags)
    precision = tp / np.arange(1, tp_flags.size + 1)
    recall = tp / num_gt
    # precision envelope, non-increasing from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def match_predictions(results: Sequence[DetResult], iou_threshold: float = 0.5,
                      conf_floor: float = 0.001) -> tuple[np.ndarray, np.ndarray]:
    """
    Greedy matching in descending confidence (ties by image, then box index). Returns the confidences and
    TP flags of the kept predictions in processing order.
    """
    entries = []
    for image, result in enumerate(results):
        for index, (box, score) in enumerate(result.predictions):
            if not 0.0 <= score <= 1.0:
                raise HnkExceptBadOptions(f"Confidence {score} of image {image} box {index} is outside [0, 1]")
            if score >= conf_floor:
                entries.append((-score, image, index))
    entries.sort()

    overlaps = {}
    matched = {}
    for image, result in enumerate(results):
        predicted = boxes_to_array([box for box, _ in result.predictions])
        overlaps[image] = iou_matrix(predicted, boxes_to_array(result.gts))
        matched[image] = np.zeros(len(result.gts), dtype=bool)

    flags = np.zeros(len(entries), dtype=bool)
    for position, (_, image, index) in enumerate(entries):
        if not matched[image].size:
            continue
        candidates = np.where(matched[image], -1.0, overlaps[image][index])
        best = int(np.argmax(candidates))
        if candidates[best] >= iou_threshold:
            matched[image][best] = True
            flags[position] = True
    return np.array([-entry[0] for entry in entries]), flags


def average_precision(results: Sequence[DetResult], iou_threshold: float = 0.5,
                      conf_floor: float = 0.001) -> APResult:
    num_gt = sum(len(result.gts) for result in results)
    if num_gt == 0:
        return APResult(None, None, 0, 0)
    _, flags = match_predictions(results, iou_threshold, conf_floor)
    num_tp = int(flags.sum())
    return APResult(_envelope_area(flags.astype(np.float64), num_gt), num_tp / num_gt, num_gt, num_tp)


def map50(aps: Sequence[Optional[float]]) -> float:
    defined = [ap for ap in aps if ap is not None]
    if not defined:
        raise HnkExceptUndefinedMetric("mAP is undefined: no class has any ground truth")
    return float(np.mean(defined))


def _check_masks(pred_mask: np.ndarray, gt_mask: np.ndarray, classes: int) -> tuple[np.ndarray, np.ndarray]:
    pred_mask = np.asarray(pred_mask)
    gt_mask = np.asarray(gt_mask)
    if pred_mask.shape != gt_mask.shape:
        raise HnkExceptShapeMismatch(f"Masks differ in shape: prediction {pred_mask.shape}, gt {gt_mask.shape}")
    for label, mask in (("prediction", pred_mask), ("gt", gt_mask)):
        if mask.size and (mask.min() < 0 or mask.max() >= classes):
            raise HnkExceptBadOptions(f"{label} mask holds values outside [0, {classes})")
    return pred_mask.astype(np.int64), gt_mask.astype(np.int64)


class ConfusionMatrix:
    """Pixel counts, rows are ground truth and columns prediction"""

    def __init__(self, classes: int = 3, counts: Optional[np.ndarray] = None):
        self.classes = classes
        self.counts = np.zeros((classes, classes), dtype=np.int64) if counts is None else counts

    def add(self, pred_mask: np.ndarray, gt_mask: np.ndarray) -> ConfusionMatrix:
        pred_mask, gt_mask = _check_masks(pred_mask, gt_mask, self.classes)
        flat = self.classes * gt_mask.ravel() + pred_mask.ravel()
        self.counts += np.bincount(flat, minlength=self.classes ** 2).reshape(self.classes, self.classes)
        return self

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if other.classes != self.classes:
            raise HnkExceptShapeMismatch(f"Cannot add {self.classes}- and {other.classes}-class matrices")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def present(self) -> np.ndarray:
        return (self.counts.sum(axis=0) + self.counts.sum(axis=1)) > 0

    def iou_per_class(self) -> np.ndarray:
        """NaN for classes absent from both ground truth and prediction"""
        intersection = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - intersection
        out = np.full(self.classes, np.nan)
        np.divide(intersection, union, out=out, where=union > 0)
        return out

    def miou(self) -> float:
        if not self.present().any():
            raise HnkExceptUndefinedMetric("mIoU is undefined for an empty confusion matrix")
        return float(np.mean(self.iou_per_class()[self.present()]))

    def pixel_accuracy(self) -> float:
        if self.total == 0:
            raise HnkExceptUndefinedMetric("Pixel accuracy is undefined for an empty confusion matrix")
        return float(np.trace(self.counts) / self.total)

    def class_accuracy(self) -> np.ndarray:
        rows = self.counts.sum(axis=1)
        out = np.full(self.classes, np.nan)
        np.divide(np.diag(self.counts).astype(np.float64), rows, out=out, where=rows > 0)
        return out


def confusion_accumulate(pred_mask: np.ndarray, gt_mask: np.ndarray, classes: int = 3) -> ConfusionMatrix:
    return ConfusionMatrix(classes).add(pred_mask, gt_mask)


def iou_per_class(matrix: ConfusionMatrix) -> np.ndarray:
    return matrix.iou_per_class()


def miou(matrix: ConfusionMatrix) -> float:
    return matrix.miou()


def lane_accuracy(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """Fraction of gt lane pixels predicted as lane. With no gt lane: 1.0 if the prediction has none"""
    pred_mask, gt_mask = _check_masks(pred_mask, gt_mask, 3)
    lane = gt_mask == LANE
    if not lane.any():
        return 0.0 if np.any(pred_mask == LANE) else 1.0
    return float(np.sum(pred_mask[lane] == LANE) / np.sum(lane))


class LaneAccuracy:
    """Aggregate over images weighted by gt lane pixel count. Images without gt lane are left out"""

    def __init__(self):
        self.hits = 0
        self.lane_pixels = 0
        self.skipped_images = 0

    def update(self, pred_mask: np.ndarray, gt_mask: np.ndarray):
        pred_mask, gt_mask = _check_masks(pred_mask, gt_mask, 3)
        lane = gt_mask == LANE
        if not lane.any():
            self.skipped_images += 1
            return
        self.hits += int(np.sum(pred_mask[lane] == LANE))
        self.lane_pixels += int(np.sum(lane))

    @property
    def value(self) -> Optional[float]:
        if self.lane_pixels == 0:
            return None
        return self.hits / self.lane_pixels


def _optional(value) -> Optional[float]:
    return None if value is None or (isinstance(value, float) and np.isnan(value)) else float(value)


def evaluate_model(params: ModelParams, samples: Sequence, eval_cfg: EvalConfig, threads: int = 1) -> dict:
    """
    Runs predict over samples and builds the evaluation report. Samples carry image, boxes and seg_mask
    """
    grid = anchor_grid(params.config)

    def run(sample):
        return predict(params, Tensor(sample.image), eval_cfg.conf_threshold, eval_cfg.nms_threshold,
                       eval_cfg.max_detections, grid)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outputs = list(executor.map(run, samples))
    else:
        outputs = [run(sample) for sample in samples]

    num_classes = params.config.num_classes_det
    per_class = [[] for _ in range(num_classes)]
    matrix = ConfusionMatrix(3)
    lanes = LaneAccuracy()
    predictions = 0
    for sample, (detections, mask) in zip(samples, outputs):
        predictions += len(detections)
        for label in range(num_classes):
            per_class[label].append(DetResult(
                [(d.box, d.score) for d in detections if d.box.label == label],
                [box for box in sample.boxes if box.label == label]))
        matrix.add(mask, sample.seg_mask)
        lanes.update(mask, sample.seg_mask)

    ap_results = [average_precision(results, eval_cfg.iou_threshold, eval_cfg.conf_threshold)
                  for results in per_class]
    num_gt = sum(r.num_gt for r in ap_results)
    ious = matrix.iou_per_class()
    report = {
        "map50": map50([r.ap for r in ap_results]) if num_gt else None,
        "ap_per_class": [r.ap for r in ap_results],
        "recall": sum(r.num_tp for r in ap_results) / num_gt if num_gt else None,
        "iou": {name: _optional(value) for name, value in zip(SEG_CLASS_NAMES, ious)},
        "miou": matrix.miou() if matrix.total else None,
        "pixel_accuracy": matrix.pixel_accuracy() if matrix.total else None,
        "class_accuracy": {name: _optional(value) for name, value in zip(SEG_CLASS_NAMES, matrix.class_accuracy())},
        "lane_accuracy": lanes.value,
        "counts": {"images": len(samples), "gt_boxes": num_gt, "predictions": predictions,
                   "true_positives": sum(r.num_tp for r in ap_results), "pixels": matrix.total,
                   "images_without_lane": lanes.skipped_images},
    }
    logger.info(f"Evaluated {len(samples)} images: mAP50 {report['map50']}, mIoU {report['miou']}")
    return report
