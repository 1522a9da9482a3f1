"""
Detection and segmentation losses built from tensor primitives, so every term is differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .anchors import AnchorGrid
from .assign import Assignment
from .exception import HnkExceptBadConfig, HnkExceptShapeMismatch
from .geometry import Box, boxes_to_array, encode_targets
from .tensor import Tensor

PROB_CLAMP = 1e-7
TVERSKY_GUARD = 1e-7


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 4.0
    lambda_seg: float = 1.0
    phi: float = 0.7
    gamma_focal: float = 2.0
    alpha_focal: float = 0.25
    delta2: float = 1.0 / 9.0

    def validate(self):
        for name in ("alpha", "beta", "alpha1", "alpha2", "alpha3", "lambda_seg", "delta2"):
            if getattr(self, name) <= 0:
                raise HnkExceptBadConfig(f"Loss weight {name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.phi < 1.0:
            raise HnkExceptBadConfig(f"Tversky phi must lie in (0, 1), got {self.phi}")
        if not 0.0 < self.alpha_focal < 1.0:
            raise HnkExceptBadConfig(f"alpha_focal must lie in (0, 1), got {self.alpha_focal}")
        if self.gamma_focal < 0:
            raise HnkExceptBadConfig(f"gamma_focal must not be negative, got {self.gamma_focal}")


def _constant(value: Union[Tensor, np.ndarray, Sequence]) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)


def _zero() -> Tensor:
    return Tensor(0.0)


def focal_loss(pred_prob: Tensor, target, alpha_focal: float = 0.25, gamma_focal: float = 2.0) -> Tensor:
    """Mean of -alpha_t (1 - p_t)^gamma log(p_t) over all elements"""
    target = _constant(target)
    if target.shape != pred_prob.shape:
        raise HnkExceptShapeMismatch(f"focal_loss: prediction {pred_prob.shape} vs target {target.shape}")
    p = T.clamp(pred_prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    p_t = T.affine(p, scale=2.0 * target - 1.0, shift=1.0 - target)
    alpha_t = alpha_focal * target + (1.0 - alpha_focal) * (1.0 - target)
    modulator = T.power(T.affine(p_t, scale=-1.0, shift=1.0), gamma_focal)
    return T.reduce_mean(T.affine(T.mul(modulator, T.log(p_t)), scale=-alpha_t))


def smooth_l1(x: Tensor, delta2: float = 1.0 / 9.0) -> Tensor:
    """Quadratic 0.5/delta2 * x^2 below delta2, x - delta2/2 above. Mean over elements"""
    if x.size == 0:
        return _zero()
    delta1 = 0.5 / delta2
    quadratic = T.affine(T.power(x, 2.0), scale=delta1)
    linear = T.affine(x, shift=-delta2 / 2.0)
    return T.reduce_mean(T.where(x.data < delta2, quadratic, linear))


def detection_loss(det_out: Tensor, assignment: Assignment, gts: Sequence[Box], anchors: AnchorGrid,
                   w: LossWeights) -> tuple[Tensor, dict]:
    """
    det_out rows follow the anchor order: (r_x, r_y, r_w, r_h, objectness logit, class logits...).
    Returns the weighted sum and the breakdown of its three weighted terms.
    """
    if det_out.shape[0] != len(anchors) or det_out.data.ndim != 2 or det_out.shape[1] < 6:
        raise HnkExceptShapeMismatch(f"detection_loss: det_out {det_out.shape} does not match "
                                     f"{len(anchors)} anchors with 5 + classes columns")
    num_classes = det_out.shape[1] - 5
    positives = np.flatnonzero(assignment.positive)
    kept = np.flatnonzero(~assignment.ignored)

    objectness = T.sigmoid(T.take(T.take(det_out, kept, axis=0), [4], axis=1))
    obj_target = assignment.positive[kept].astype(np.float64).reshape(-1, 1)
    l_obj = focal_loss(objectness, obj_target, w.alpha_focal, w.gamma_focal) if kept.size else _zero()

    if positives.size and gts:
        rows = T.take(det_out, positives, axis=0)
        matched = boxes_to_array(gts)[assignment.labels[positives]]
        targets = encode_targets(matched, anchors.cells[positives])
        offsets = T.take(rows, [0, 1, 2, 3], axis=1)
        residual = T.reduce_sum(T.absolute(T.sub(offsets, Tensor(targets))), axis=1)
        l_box = smooth_l1(residual, w.delta2)

        labels = np.array([gts[i].label for i in assignment.labels[positives]], dtype=np.int64)
        if np.any(labels < 0) or np.any(labels >= num_classes):
            raise HnkExceptShapeMismatch(f"detection_loss: box labels {sorted(set(labels))} outside "
                                         f"[0, {num_classes})")
        class_target = np.zeros((positives.size, num_classes))
        class_target[np.arange(positives.size), labels] = 1.0
        class_prob = T.sigmoid(T.take(rows, list(range(5, 5 + num_classes)), axis=1))
        l_class = focal_loss(class_prob, class_target, w.alpha_focal, w.gamma_focal)
    else:
        l_box, l_class = _zero(), _zero()

    weighted_class = T.scalar_mul(l_class, w.alpha1)
    weighted_obj = T.scalar_mul(l_obj, w.alpha2)
    weighted_box = T.scalar_mul(l_box, w.alpha3)
    total = T.add(T.add(weighted_class, weighted_obj), weighted_box)
    breakdown = {"class": weighted_class.item(), "obj": weighted_obj.item(), "box": weighted_box.item()}
    return total, breakdown


def _flatten_classes(pred_prob: Tensor, gt_onehot) -> tuple[Tensor, np.ndarray]:
    gt = _constant(gt_onehot)
    if gt.shape != pred_prob.shape:
        raise HnkExceptShapeMismatch(f"segmentation loss: prediction {pred_prob.shape} vs target {gt.shape}")
    classes = pred_prob.shape[0]
    return T.reshape(pred_prob, (classes, -1)), gt.reshape(classes, -1)


def tversky_loss(pred_prob: Tensor, gt_onehot, phi: float = 0.7) -> Tensor:
    """C - sum_c TP / (TP + phi FN + (1 - phi) FP) with soft counts per class"""
    p, g = _flatten_classes(pred_prob, gt_onehot)
    classes = p.shape[0]
    tp = T.reduce_sum(T.mul(p, Tensor(g)), axis=1)
    fn = T.reduce_sum(T.mul(T.affine(p, scale=-1.0, shift=1.0), Tensor(g)), axis=1)
    fp = T.reduce_sum(T.mul(p, Tensor(1.0 - g)), axis=1)
    denominator = T.affine(T.add(T.add(tp, T.scalar_mul(fn, phi)), T.scalar_mul(fp, 1.0 - phi)),
                           shift=TVERSKY_GUARD)
    return T.affine(T.reduce_sum(T.div(tp, denominator)), scale=-1.0, shift=float(classes))


def seg_focal_loss(pred_prob: Tensor, gt_onehot, alpha_focal: float = 0.25, gamma_focal: float = 2.0) -> Tensor:
    """-alpha / N sum_c sum_n g (1 - p)^gamma log(p)"""
    p, g = _flatten_classes(pred_prob, gt_onehot)
    pixels = p.shape[1]
    p = T.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    term = T.mul(T.power(T.affine(p, scale=-1.0, shift=1.0), gamma_focal), T.log(p))
    return T.reduce_sum(T.affine(term, scale=-alpha_focal * g / pixels))


def seg_loss(pred_prob: Tensor, gt_onehot, w: LossWeights) -> Tensor:
    tversky = tversky_loss(pred_prob, gt_onehot, w.phi)
    focal = seg_focal_loss(pred_prob, gt_onehot, w.alpha_focal, w.gamma_focal)
    return T.add(tversky, T.scalar_mul(focal, w.lambda_seg))


def total_loss(det_term: Optional[Tensor], seg_term: Optional[Tensor], w: LossWeights) -> Tensor:
    """alpha * det + beta * seg. A missing term counts as zero"""
    terms = []
    if det_term is not None:
        terms.append(T.scalar_mul(det_term, w.alpha))
    if seg_term is not None:
        terms.append(T.scalar_mul(seg_term, w.beta))
    if not terms:
        return _zero()
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])


def one_hot(mask: np.ndarray, classes: int = 3) -> np.ndarray:
    """(H, W) integer mask to a (classes, H, W) float one-hot array"""
    mask = np.asarray(mask, dtype=np.int64)
    return (np.arange(classes)[:, None, None] == mask[None, :, :]).astype(np.float64)
