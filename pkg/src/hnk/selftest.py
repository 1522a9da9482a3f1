"""
Invariant suites behind `hnk selftest`: gradient checks, closed-form loss identities, the exhaustive
oracles the fast code paths are compared against, and the freezing guarantee of staged training.

The oracles are plain loops restating the rules, shared with the unit tests.
"""
from __future__ import annotations

import itertools
import logging
import math
import time
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .anchors import AnchorConfig, generate_grid, kmeans_fit, mean_best_iou, prior_sizes
from .assign import IGNORE, NEGATIVE, assign
from .exception import HnkException, HnkExceptBadOptions, HnkExceptSelftestFailed
from .geometry import AnchorRef, Box, decode, encode, iou, nms
from .losses import (LossWeights, detection_loss, focal_loss, one_hot, seg_focal_loss, seg_loss, smooth_l1,
                     total_loss, tversky_loss)
from .metrics import DetResult, average_precision
from .model import GROUPS, ModelConfig, anchor_grid, build, forward, layer_params
from .scenes import SceneSpec, generate
from .tensor import Tensor, backward, grad_check
from .trainer import PlateauState, TrainConfig, plateau_schedule, staged_train

GRAD_STEP = 1e-5

logger = logging.getLogger("debug_log")


class Check(NamedTuple):
    cases: int
    metric: str
    value: float
    limit: float


class SuiteResult(NamedTuple):
    name: str
    passed: bool
    cases: int
    metric: str
    value: float
    limit: float
    seconds: float
    error: Optional[str] = None


_suites: dict[str, Callable[[np.random.Generator, float], Check]] = {}


def suite(name: str):
    def register(function):
        _suites[name] = function
        return function

    return register


def suite_names() -> list[str]:
    return list(_suites)


def _count(full: int, scale: float) -> int:
    return max(1, int(round(full * scale)))


def primitive_cases(rng: np.random.Generator) -> list[tuple[str, Callable[[Tensor], Tensor], tuple]]:
    """(name, function of x, shape of x) for every primitive, contracted to a scalar"""
    w_conv = Tensor(rng.normal(size=(2, 2, 3, 3)))
    w_dw = Tensor(rng.normal(size=(2, 1, 3, 3)))
    w_pw = Tensor(rng.normal(size=(3, 2)))
    proj_4 = Tensor(rng.normal(size=(2, 4, 4)))
    proj_8 = Tensor(rng.normal(size=(2, 8, 8)))
    proj_2 = Tensor(rng.normal(size=(2, 2, 2)))
    other = Tensor(rng.uniform(0.5, 1.5, size=(2, 4, 4)))
    condition = rng.uniform(size=(5,)) > 0.5
    shift = rng.normal(size=(5,))

    def dot(y, proj):
        return T.reduce_sum(T.mul(y, proj))

    return [
        ("conv2d", lambda x: dot(T.conv2d(x, w_conv), proj_4), (2, 4, 4)),
        ("conv2d stride 2", lambda x: dot(T.conv2d(x, w_conv, stride=2), proj_2), (2, 4, 4)),
        ("conv2d kernel", lambda w: dot(T.conv2d(proj_4, w), proj_4), (2, 2, 3, 3)),
        ("depthwise_conv2d", lambda x: dot(T.depthwise_conv2d(x, w_dw), proj_4), (2, 4, 4)),
        ("depthwise_conv2d kernel", lambda w: dot(T.depthwise_conv2d(proj_4, w), proj_4), (2, 1, 3, 3)),
        ("pointwise_conv2d", lambda x: T.reduce_sum(T.pointwise_conv2d(x, w_pw)), (2, 4, 4)),
        ("pointwise_conv2d kernel", lambda w: T.reduce_sum(T.pointwise_conv2d(proj_4, w)), (3, 2)),
        ("bias_add", lambda b: dot(T.bias_add(proj_4, b), proj_4), (2,)),
        ("relu", lambda x: dot(T.relu(x), proj_4), (2, 4, 4)),
        ("sigmoid", lambda x: dot(T.sigmoid(x), proj_4), (2, 4, 4)),
        ("swish", lambda x: dot(T.swish(x), proj_4), (2, 4, 4)),
        ("softmax_channel", lambda x: dot(T.softmax_channel(x), proj_4), (2, 4, 4)),
        ("upsample_bilinear", lambda x: dot(T.upsample_bilinear(x, (8, 8)), proj_8), (2, 4, 4)),
        ("downsample_stride2", lambda x: dot(T.downsample_stride2(x), proj_4), (2, 8, 8)),
        ("add", lambda x: dot(T.add(x, proj_4), proj_4), (2, 4, 4)),
        ("sub", lambda x: T.reduce_sum(T.sub(T.mul(x, x), x)), (5,)),
        ("scalar_mul", lambda x: dot(T.scalar_mul(x, 1.7), proj_4), (2, 4, 4)),
        ("scalar_mul tensor", lambda x: T.reduce_sum(T.scalar_mul(x, T.reduce_sum(x))), (5,)),
        ("weighted_sum", lambda w: dot(T.weighted_sum(w, [proj_4, other]), proj_4), (2,)),
        ("weighted_sum inputs", lambda x: dot(T.weighted_sum(Tensor([0.7, 1.3]), [x, other]), proj_4), (2, 4, 4)),
        ("log", lambda x: dot(T.log(T.add(T.absolute(x), other)), proj_4), (2, 4, 4)),
        ("reduce_sum", lambda x: T.reduce_sum(T.mul(x, x)), (2, 4, 4)),
        ("reduce_mean", lambda x: T.reduce_mean(T.mul(T.reduce_mean(x, axis=0), Tensor(proj_4.data[0]))), (2, 4, 4)),
        ("div", lambda x: dot(T.div(proj_4, T.add(T.absolute(x), other)), proj_4), (2, 4, 4)),
        ("exp", lambda x: dot(T.exp(x), proj_4), (2, 4, 4)),
        ("pow", lambda x: dot(T.power(T.add(T.absolute(x), other), 2.5), proj_4), (2, 4, 4)),
        ("abs", lambda x: T.reduce_sum(T.mul(T.absolute(x), x)), (5,)),
        ("clamp", lambda x: T.reduce_sum(T.mul(T.clamp(x, -0.5, 0.5), x)), (5,)),
        ("where", lambda x: T.reduce_sum(T.mul(T.where(condition, T.exp(x), x), x)), (5,)),
        ("affine", lambda x: T.reduce_sum(T.mul(T.affine(x, 3.0, shift), x)), (5,)),
        ("transpose", lambda x: dot(T.reshape(T.transpose(x, (1, 2, 0)), (2, 4, 4)), proj_4), (2, 4, 4)),
        ("concat", lambda x: T.reduce_sum(T.mul(T.concat([x, proj_4], axis=1), Tensor(np.ones((2, 8, 4))))),
         (2, 4, 4)),
        ("take", lambda x: T.reduce_sum(T.take(x, [0, 3, 3], axis=1)), (2, 4, 4)),
    ]


def random_simplex(rng: np.random.Generator, classes: int, pixels: int) -> np.ndarray:
    return T.softmax_channel(Tensor(rng.normal(size=(classes, pixels)))).data


def random_box(rng: np.random.Generator, span: float = 40.0) -> Box:
    x1, y1 = rng.uniform(0, span, size=2)
    w, h = rng.uniform(1, span / 2, size=2)
    return Box(x1, y1, x1 + w, y1 + h)


def random_gt(rng: np.random.Generator, size: float = 16.0) -> Box:
    w, h = rng.uniform(1.0, size * 0.8, size=2)
    x1 = rng.uniform(0, size - w)
    y1 = rng.uniform(0, size - h)
    return Box(x1, y1, x1 + w, y1 + h)


def random_results(rng: np.random.Generator, images: int, max_gts: int = 3, max_predictions: int = 5) -> list[DetResult]:
    """Images with up to max_gts boxes and up to max_predictions scored guesses, most of them near a gt"""
    results = []
    for _ in range(images):
        gts = []
        for _ in range(rng.integers(0, max_gts + 1)):
            x, y = rng.uniform(0, 24, size=2)
            w, h = rng.uniform(3, 8, size=2)
            gts.append(Box(x, y, x + w, y + h))
        predictions = []
        for _ in range(rng.integers(0, max_predictions + 1)):
            if gts and rng.uniform() < 0.7:
                gt = gts[rng.integers(len(gts))]
                shift = rng.normal(scale=1.0, size=4)
                box = Box(gt.x1 + shift[0], gt.y1 + shift[1], gt.x2 + abs(shift[2]), gt.y2 + abs(shift[3]))
            else:
                x, y = rng.uniform(0, 24, size=2)
                box = Box(x, y, x + rng.uniform(3, 8), y + rng.uniform(3, 8))
            predictions.append((box, float(np.round(rng.uniform(), 1))))
        results.append(DetResult(predictions, gts))
    return results


def nms_oracle(boxes: Sequence[Box], scores: Sequence[float], threshold: float) -> list[int]:
    """The unique subset consistent with greedy suppression, found by trying all subsets"""
    n = len(boxes)
    priority = sorted(range(n), key=lambda i: (-scores[i], i))
    rank = {index: position for position, index in enumerate(priority)}
    for size in range(n, 0, -1):
        for subset in itertools.combinations(range(n), size):
            kept = set(subset)
            consistent = True
            for index in range(n):
                blocked = any(rank[other] < rank[index] and iou(boxes[other], boxes[index]) > threshold
                              for other in kept)
                if (index in kept) == blocked:
                    consistent = False
                    break
            if consistent:
                return sorted(kept, key=lambda i: rank[i])
    return []


def reference_ap(results: Sequence[DetResult], iou_threshold: float, conf_floor: float) -> tuple[float, float]:
    """Loop-by-loop matching and the envelope written as a max over later precisions"""
    order = sorted((-score, image, index)
                   for image, result in enumerate(results)
                   for index, (_, score) in enumerate(result.predictions) if score >= conf_floor)
    used = [[False] * len(result.gts) for result in results]
    flags = []
    for _, image, index in order:
        box = results[image].predictions[index][0]
        best, best_iou = None, -1.0
        for g, gt in enumerate(results[image].gts):
            if not used[image][g] and iou(box, gt) > best_iou:
                best, best_iou = g, iou(box, gt)
        hit = best is not None and best_iou >= iou_threshold
        if hit:
            used[image][best] = True
        flags.append(hit)
    num_gt = sum(len(result.gts) for result in results)
    precisions = [sum(flags[:k + 1]) / (k + 1) for k in range(len(flags))]
    ap = sum(max(precisions[k:]) / num_gt for k in range(len(flags)) if flags[k])
    return ap, sum(flags) / num_gt


def reference_labels(anchor_boxes: np.ndarray, cell_boxes: np.ndarray, gts: Sequence[Box]) -> list[int]:
    """
    Plain-loop restatement of the assignment rules. Forced anchors are matched greedily over all owned
    (anchor, gt) pairs in falling IoU order, each anchor and each gt used at most once.
    """
    n, m = len(anchor_boxes), len(gts)
    anchors = [Box(*row) for row in anchor_boxes]
    cells = [Box(*row) for row in cell_boxes]

    def owns(a, j):
        cx, cy, _, _ = gts[j].to_center()
        return cells[a].x1 <= cx < cells[a].x2 and cells[a].y1 <= cy < cells[a].y2

    ious = [[iou(anchors[a], gts[j]) for j in range(m)] for a in range(n)]

    pairs = sorted((-ious[a][j], a, j) for a in range(n) for j in range(m) if owns(a, j) and ious[a][j] > 0.0)
    forced, matched = {}, set()
    for _, a, j in pairs:
        if a not in forced and j not in matched:
            forced[a] = j
            matched.add(j)

    labels = []
    for a in range(n):
        if a in forced:
            labels.append(forced[a])
            continue
        chosen, chosen_iou = None, -1.0
        for j in range(m):
            threshold = 0.5 if gts[j].area > 100 else 0.25
            if owns(a, j) and ious[a][j] >= threshold and ious[a][j] > chosen_iou:
                chosen, chosen_iou = j, ious[a][j]
        if chosen is not None:
            labels.append(chosen)
        elif not ious[a] or max(ious[a]) < 0.25:
            labels.append(NEGATIVE)
        else:
            labels.append(IGNORE)
    return labels


def concentric_gts(rng: np.random.Generator, size: float = 16.0) -> list[Box]:
    """Two to three boxes around one center, so they share every owning cell"""
    cx, cy = rng.uniform(size * 0.25, size * 0.75, size=2)
    gts = []
    for _ in range(int(rng.integers(2, 4))):
        w, h = rng.uniform(size * 0.25, size * 0.5, size=2)
        gts.append(Box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    return gts


def tiny_model_config(size: int = 64) -> ModelConfig:
    cfg = ModelConfig(input_w=size, input_h=size, backbone_channels=[4, 4, 6, 6, 8], fpn_channels=6,
                      bifpn_repeats=1, seg_fuse_channels=6)
    cfg.anchors = AnchorConfig(levels=[3, 4, 5, 6])
    return cfg


@suite("primitive gradients")
def primitive_gradients(rng: np.random.Generator, scale: float) -> Check:
    points = _count(10, scale)
    worst, cases = 0.0, 0
    for _, function, shape in primitive_cases(rng):
        for _ in range(points):
            worst = max(worst, grad_check(function, Tensor(rng.normal(size=shape)), GRAD_STEP))
            cases += 1
    return Check(cases, "max relative error", worst, 1e-4)


@suite("loss gradients")
def loss_gradients(rng: np.random.Generator, scale: float) -> Check:
    points = _count(10, scale)
    grid = generate_grid(AnchorConfig(levels=[3, 4]), 16, 16)
    gts = [Box(1.0, 2.0, 9.0, 13.0, 0), Box(8.5, 7.0, 15.0, 11.0, 0)]
    assignment = assign(grid, gts)
    weights = LossWeights()
    target = (rng.uniform(size=(6,)) > 0.5).astype(float)
    worst, cases = 0.0, 0
    for _ in range(points):
        gt = one_hot(rng.integers(0, 3, size=(4, 4)))
        checks = [
            (lambda x: focal_loss(T.sigmoid(x), target), rng.normal(size=(6,))),
            (lambda x: smooth_l1(T.absolute(x)), rng.normal(scale=0.3, size=8)),
            (lambda x: detection_loss(x, assignment, gts, grid, weights)[0],
             rng.normal(scale=0.5, size=(len(grid), 6))),
            (lambda x: tversky_loss(T.softmax_channel(x), gt, weights.phi), rng.normal(size=(3, 4, 4))),
            (lambda x: seg_focal_loss(T.softmax_channel(x), gt), rng.normal(size=(3, 4, 4))),
            (lambda x: seg_loss(T.softmax_channel(x), gt, weights), rng.normal(size=(3, 4, 4))),
        ]
        for function, point in checks:
            worst = max(worst, grad_check(function, Tensor(point), GRAD_STEP))
            cases += 1
    return Check(cases, "max relative error", worst, 1e-4)


@suite("model gradient")
def model_gradient(rng: np.random.Generator, scale: float) -> Check:
    cfg = tiny_model_config()
    params = build(cfg, int(rng.integers(1 << 31)))
    image = Tensor(rng.uniform(size=(3, 64, 64)))
    gts = [Box(10.0, 12.0, 30.0, 25.0, 0), Box(40.0, 40.0, 47.0, 46.0, 0)]
    grid = anchor_grid(cfg)
    assignment = assign(grid, gts)
    target = one_hot(rng.integers(0, 3, size=(64, 64)))
    weights = LossWeights()

    def loss():
        output = forward(params, image)
        det, _ = detection_loss(output.det_raw, assignment, gts, grid, weights)
        return total_loss(det, seg_loss(T.softmax_channel(output.seg_logits), target, weights), weights)

    grads = backward(loss(), params.tensors)
    names = params.names()
    samples = _count(64, scale)
    worst = 0.0
    for _ in range(samples):
        name = names[int(rng.integers(len(names)))]
        data = params[name].data
        index = int(rng.integers(data.size))
        original = data.flat[index]
        with T.no_grad():
            data.flat[index] = original + GRAD_STEP
            plus = loss().item()
            data.flat[index] = original - GRAD_STEP
            minus = loss().item()
        data.flat[index] = original
        analytic = grads[name].flat[index]
        numeric = (plus - minus) / (2 * GRAD_STEP)
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    return Check(samples, "max relative error", worst, 1e-3)


@suite("loss identities")
def loss_identities(rng: np.random.Generator, scale: float) -> Check:
    inputs = _count(100, scale)
    worst = 0.0
    for _ in range(inputs):
        p = rng.uniform(0.01, 0.99, size=7)
        t = (rng.uniform(size=7) > 0.5).astype(float)
        ce = np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p)))
        worst = max(worst, abs(focal_loss(Tensor(p), t, 0.5, 0.0).item() - 0.5 * ce))

        p = random_simplex(rng, 3, 10)
        g = one_hot(rng.integers(0, 3, size=(1, 10)))[:, 0, :]
        dice = 3 - np.sum(2 * np.sum(p * g, axis=1) / (np.sum(p, axis=1) + np.sum(g, axis=1) + 2e-7))
        worst = max(worst, abs(tversky_loss(Tensor(p), g, 0.5).item() - dice))
    return Check(2 * inputs, "max abs deviation", worst, 1e-12)


@suite("smooth l1 continuity")
def smooth_l1_continuity(rng: np.random.Generator, scale: float) -> Check:
    delta2 = 1.0 / 9.0
    below = smooth_l1(Tensor([np.nextafter(delta2, 0.0)]), delta2).item()
    at = smooth_l1(Tensor([delta2]), delta2).item()
    return Check(1, "branch gap", abs(at - below), 1e-15)


@suite("box codec roundtrip")
def codec_roundtrip(rng: np.random.Generator, scale: float) -> Check:
    pairs = _count(10000, scale)
    worst = 0.0
    for _ in range(pairs):
        level = int(rng.integers(3, 8))
        stride = 2 ** level
        anchor = AnchorRef(int(rng.integers(0, 10)), int(rng.integers(0, 10)),
                           rng.uniform(0.5, 8), rng.uniform(0.5, 8), level, stride)
        offset = rng.uniform(0.01, 0.99, size=2)
        gt = Box.from_center((anchor.c_x + offset[0]) * stride, (anchor.c_y + offset[1]) * stride,
                             rng.uniform(2, 200), rng.uniform(2, 200))
        back = decode(encode(gt, anchor), anchor)
        worst = max(worst, max(abs(a - b) for a, b in zip(gt[:4], back[:4])))
    return Check(pairs, "max px error", worst, 1e-9)


@suite("nms oracle")
def nms_equivalence(rng: np.random.Generator, scale: float) -> Check:
    instances = _count(1000, scale)
    mismatches = 0
    for _ in range(instances):
        n = int(rng.integers(1, 9))
        boxes = [random_box(rng, span=20.0) for _ in range(n)]
        scores = list(np.round(rng.uniform(size=n), 1))
        threshold = float(rng.uniform(0.1, 0.7))
        mismatches += nms(boxes, scores, threshold) != nms_oracle(boxes, scores, threshold)
    return Check(instances, "mismatches", mismatches, 1)


@suite("average precision oracle")
def ap_equivalence(rng: np.random.Generator, scale: float) -> Check:
    instances = _count(500, scale)
    worst, checked = 0.0, 0
    while checked < instances:
        results = random_results(rng, int(rng.integers(1, 4)))
        if not any(result.gts for result in results):
            continue
        ap, recall = reference_ap(results, 0.5, 0.001)
        result = average_precision(results, 0.5, 0.001)
        worst = max(worst, abs(result.ap - ap), abs(result.recall - recall))
        checked += 1
    return Check(instances, "max abs deviation", worst, 1e-12)


@suite("assignment oracle")
def assign_equivalence(rng: np.random.Generator, scale: float) -> Check:
    instances = _count(200, scale)
    failures = 0
    for index in range(instances):
        cfg = AnchorConfig(levels=[3, 4], base_scale_constant=float(rng.uniform(0.4, 2.0)))
        grid = generate_grid(cfg, 16, 16)
        shared = bool(index % 2)
        gts = concentric_gts(rng) if shared else [random_gt(rng) for _ in range(int(rng.integers(0, 4)))]
        labels = list(assign(grid, gts).labels)
        failures += labels != reference_labels(grid.boxes, grid.cell_boxes, gts)
        if shared:
            # boxes sharing a cell still get one positive each
            failures += set(label for label in labels if label >= 0) != set(range(len(gts)))
    return Check(instances, "failed checks", failures, 1)


@suite("anchor geometry")
def anchor_geometry(rng: np.random.Generator, scale: float) -> Check:
    failures = 0
    grid = generate_grid(AnchorConfig(), 640, 384)
    p7 = grid.cells[grid.levels == 7]
    failures += len(grid) != 46035
    failures += (int(p7[:, 0].max()) + 1, int(p7[:, 1].max()) + 1) != (5, 3)

    scenes = generate(SceneSpec(seed=7), _count(200, scale))
    sizes = np.array([[box.w, box.h] for sample in scenes for box in sample.boxes])
    clusters = kmeans_fit(sizes, 9, seed=7)
    fitted = mean_best_iou(sizes, [[c.w, c.h] for c in clusters])
    defaults = mean_best_iou(sizes, np.concatenate([prior_sizes(AnchorConfig(), level) for level in range(3, 8)]))
    logger.debug(f"selftest: fitted priors mean best IoU {fitted:.4f}, default priors {defaults:.4f}")
    failures += fitted < defaults
    return Check(3, "failed checks", failures, 1)


@suite("cost counter")
def cost_counter(rng: np.random.Generator, scale: float) -> Check:
    failures = 0
    failures += layer_params("sepconv", 3, 8, 3) != 62
    failures += layer_params("conv", 3, 8, 3) != 224
    failures += layer_params("pointwise", 3, 8, 1) != 32
    cases = 3
    for c_in, c_out in itertools.product(range(1, 65), range(2, 65)):
        failures += layer_params("sepconv", c_in, c_out, 3) >= layer_params("conv", c_in, c_out, 3)
        cases += 1
    return Check(cases, "failed checks", failures, 1)


@suite("plateau schedule")
def plateau_traces(rng: np.random.Generator, scale: float) -> Check:
    def trace(history):
        state = PlateauState(1e-3)
        return [plateau_schedule(history[:i + 1], state) for i in range(len(history))]

    failures = 0
    failures += trace([5.0, 4.0, 3.0]) != [1e-3, 1e-3, 1e-3]
    stagnant = trace([5.0, 5.0, 5.0, 5.0])
    failures += stagnant[:3] != [1e-3, 1e-3, 1e-3] or not math.isclose(stagnant[3], 1e-4, rel_tol=1e-12)
    state = PlateauState(1e-3)
    plateau_schedule([1.0], state)
    plateau_schedule([1.0, 1.0 - 1e-4], state)
    failures += (state.stagnant, state.best) != (1, 1.0)
    floor = trace([1.0] * 40)
    failures += floor[-1] != 1e-7 or any(b > a for a, b in zip(floor, floor[1:]))
    return Check(4, "failed traces", failures, 1)


@suite("freeze soundness")
def freeze_soundness(rng: np.random.Generator, scale: float) -> Check:
    cfg = ModelConfig(input_w=64, input_h=64, backbone_channels=[3, 4, 4, 6, 6], fpn_channels=4,
                      bifpn_repeats=1, seg_fuse_channels=4)
    cfg.anchors = AnchorConfig(levels=[3, 4, 5, 6])
    samples = generate(SceneSpec(seed=int(rng.integers(1 << 31)), width=64, height=64, vehicle_count=(1, 2),
                                 vehicle_size=(6, 20)), 6)
    train_cfg = TrainConfig(batch_size=2, thresholds=[math.inf] * 3, max_epochs=[1, 1, 1])
    result = staged_train(build(cfg, 0), samples[:4], samples[4:], train_cfg, LossWeights())
    failures = 0
    for report in result.stages:
        for group in GROUPS:
            unchanged = report.checksums_before[group] == report.checksums_after[group]
            # a group outside the pivot never moves, one inside always does
            failures += unchanged == (group in report.pivot)
    return Check(len(result.stages) * len(GROUPS), "failed checks", failures, 1)


def run_suite(name: str, rng: np.random.Generator, scale: float = 1.0) -> SuiteResult:
    started = time.perf_counter()
    try:
        check = _suites[name](rng, scale)
    except HnkException as e:
        seconds = time.perf_counter() - started
        logger.error(f"selftest {name}: raised {e}")
        return SuiteResult(name, False, 0, "exception", math.nan, math.nan, seconds, str(e))
    seconds = time.perf_counter() - started
    passed = bool(check.value < check.limit)
    logger.info(f"selftest {name}: {'passed' if passed else 'FAILED'}, {check.cases} cases, "
                f"{check.metric} {check.value:.3e} (limit {check.limit:.0e}), {seconds:.1f}s")
    return SuiteResult(name, passed, check.cases, check.metric, float(check.value), check.limit, seconds)


def run_selftest(names: Optional[Sequence[str]] = None, seed: int = 0, scale: float = 1.0) -> list[SuiteResult]:
    """Runs the named suites, all of them by default. Each suite draws from its own generator"""
    selected = suite_names() if names is None else list(names)
    unknown = [name for name in selected if name not in _suites]
    if unknown:
        raise HnkExceptBadOptions(f"Unknown selftest suite(s) {unknown}. Known: {suite_names()}")
    results = []
    for name in selected:
        rng = np.random.default_rng([seed, suite_names().index(name)])
        results.append(run_suite(name, rng, scale))
    return results


def check_results(results: Sequence[SuiteResult]):
    failed = [result.name for result in results if not result.passed]
    if failed:
        raise HnkExceptSelftestFailed(f"Selftest failed: {', '.join(failed)}")
