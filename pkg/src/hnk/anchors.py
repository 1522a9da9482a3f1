"""
Anchor pyramid generation and anchor prior fitting.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .exception import HnkExceptBadConfig, HnkExceptBadOptions
from .geometry import AnchorRef

DEFAULT_SCALES = (2 ** 0.0, 2 ** 0.7, 2 ** 1.32)
DEFAULT_RATIOS = ((0.62, 1.58), (1.0, 1.0), (1.58, 0.62))


@dataclass
class AnchorConfig:
    levels: list[int] = field(default_factory=lambda: [3, 4, 5, 6, 7])
    base_scale_constant: float = 4.0
    scales: list[float] = field(default_factory=lambda: list(DEFAULT_SCALES))
    ratios: list[tuple[float, float]] = field(default_factory=lambda: list(DEFAULT_RATIOS))
    # Filled by derive_scales_ratios when clusters collapse onto duplicate centroids
    warnings: list[str] = field(default_factory=list, init=False, compare=False)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def validate(self):
        if not self.levels or self.levels != list(range(3, 3 + len(self.levels))):
            raise HnkExceptBadConfig(f"Anchor levels must be contiguous starting at 3, got {self.levels}")
        if self.base_scale_constant <= 0:
            raise HnkExceptBadConfig(f"base_scale_constant must be positive, got {self.base_scale_constant}")
        if len(self.scales) != 3 or len(self.ratios) != 3:
            raise HnkExceptBadConfig(f"Exactly 3 scales and 3 ratios are required, got {len(self.scales)} scales "
                                     f"and {len(self.ratios)} ratios")
        if any(s <= 0 for s in self.scales) or list(self.scales) != sorted(self.scales):
            raise HnkExceptBadConfig(f"Anchor scales must be positive and ascending, got {self.scales}")
        if any(len(pair) != 2 or min(pair) <= 0 for pair in self.ratios):
            raise HnkExceptBadConfig(f"Every anchor ratio must be a positive (w, h) pair, got {self.ratios}")


class SizeCluster(NamedTuple):
    w: float
    h: float
    member_count: int


class AnchorGrid(Sequence[AnchorRef]):
    """
    Flat anchor list of a whole pyramid, ordered level-major, then row-major over cells, then
    scale-major over the per-cell (scale, ratio) combinations. Backed by numpy arrays.
    """

    def __init__(self, cells: np.ndarray, levels: np.ndarray):
        # rows of (c_x, c_y, c_w, c_h, stride)
        self.cells = cells
        self.levels = levels
        stride = cells[:, 4]
        cx = (cells[:, 0] + 0.5) * stride
        cy = (cells[:, 1] + 0.5) * stride
        w = cells[:, 2] * stride
        h = cells[:, 3] * stride
        self.boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
        # grid cell each anchor sits in, in pixels, used for center ownership
        self.cell_boxes = np.stack([cells[:, 0] * stride, cells[:, 1] * stride,
                                    (cells[:, 0] + 1) * stride, (cells[:, 1] + 1) * stride], axis=1)

    def __len__(self) -> int:
        return self.cells.shape[0]

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        row = self.cells[index]
        return AnchorRef(float(row[0]), float(row[1]), float(row[2]), float(row[3]),
                         int(self.levels[index]), int(row[4]))

    def __iter__(self) -> Iterator[AnchorRef]:
        for index in range(len(self)):
            yield self[index]


def _cell_sizes(cfg: AnchorConfig) -> list[tuple[float, float]]:
    return [(cfg.base_scale_constant * scale * ratio_w, cfg.base_scale_constant * scale * ratio_h)
            for scale in cfg.scales for ratio_w, ratio_h in cfg.ratios]


def generate_grid(cfg: AnchorConfig, input_w: int, input_h: int) -> AnchorGrid:
    if not cfg.levels or not cfg.scales or not cfg.ratios:
        raise HnkExceptBadConfig("Anchor config needs at least one level, scale and ratio")
    divisor = 2 ** max(cfg.levels)
    if input_w % divisor or input_h % divisor or input_w <= 0 or input_h <= 0:
        raise HnkExceptBadConfig(f"Input size {input_w}x{input_h} must be divisible by {divisor} "
                                 f"for pyramid levels {cfg.levels}")
    sizes = np.array(_cell_sizes(cfg), dtype=np.float64)
    per_cell = sizes.shape[0]
    blocks, level_blocks = [], []
    for level in cfg.levels:
        stride = 2 ** level
        grid_w, grid_h = input_w // stride, input_h // stride
        ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
        count = grid_w * grid_h
        block = np.empty((count * per_cell, 5))
        block[:, 0] = np.repeat(xs.ravel(), per_cell)
        block[:, 1] = np.repeat(ys.ravel(), per_cell)
        block[:, 2:4] = np.tile(sizes, (count, 1))
        block[:, 4] = stride
        blocks.append(block)
        level_blocks.append(np.full(count * per_cell, level, dtype=np.int64))
    grid = AnchorGrid(np.concatenate(blocks), np.concatenate(level_blocks))
    logging.getLogger("debug_log").debug(f"Generated {len(grid)} anchors for {input_w}x{input_h}, "
                                         f"levels {cfg.levels}")
    return grid


def prior_sizes(cfg: AnchorConfig, level: int) -> np.ndarray:
    """(anchors_per_cell, 2) pixel sizes of the anchors at one level"""
    return np.array(_cell_sizes(cfg), dtype=np.float64) * (2 ** level)


def wh_iou(sizes: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of origin-aligned boxes given as (w, h) rows, shape (len(sizes), len(centroids))"""
    inter = np.minimum(sizes[:, None, 0], centroids[None, :, 0]) * np.minimum(sizes[:, None, 1], centroids[None, :, 1])
    union = sizes[:, None, 0] * sizes[:, None, 1] + centroids[None, :, 0] * centroids[None, :, 1] - inter
    return inter / union


def mean_best_iou(sizes, priors) -> float:
    """Mean over boxes of the IoU with their best matching prior"""
    sizes = np.asarray(sizes, dtype=np.float64).reshape(-1, 2)
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 2)
    return float(np.mean(np.max(wh_iou(sizes, priors), axis=1)))


class KMeansFit:
    """
    Lloyd iterations under the 1 - IoU distance. The per-cluster update keeps the best of the current
    centroid, the member mean and median and the distinct member sizes, then refines it with a
    multiplicative pattern search that only accepts improvements. Distortion never increases.
    """
    pattern_steps = (0.2, 0.05, 0.01, 0.002)
    max_pattern_moves = 60
    max_candidates = 256

    def __init__(self, k: int, seed: int, max_iters: int = 300):
        self.logger = logging.getLogger("debug_log")
        self.k = k
        self.seed = seed
        self.max_iters = max_iters
        self.distortions: list[float] = []
        self.iterations = 0

    @staticmethod
    def _cost(members: np.ndarray, centroid: np.ndarray) -> float:
        return float(np.sum(1.0 - wh_iou(members, centroid.reshape(1, 2))[:, 0]))

    def _init_centroids(self, sizes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        centroids = [sizes[int(rng.integers(sizes.shape[0]))]]
        while len(centroids) < self.k:
            distance = 1.0 - np.max(wh_iou(sizes, np.array(centroids)), axis=1)
            weights = np.clip(distance, 0.0, None) ** 2
            total = weights.sum()
            if total <= 0:
                raise HnkExceptBadOptions(f"k-means needs at least {self.k} distinct sizes")
            centroids.append(sizes[int(rng.choice(sizes.shape[0], p=weights / total))])
        return np.array(centroids, dtype=np.float64)

    def _update(self, members: np.ndarray, current: np.ndarray) -> np.ndarray:
        candidates = [current, members.mean(axis=0), np.median(members, axis=0)]
        distinct = np.unique(members, axis=0)
        if distinct.shape[0] > self.max_candidates:
            distinct = distinct[np.linspace(0, distinct.shape[0] - 1, self.max_candidates).astype(int)]
        candidates.extend(distinct)
        costs = [self._cost(members, c) for c in candidates]
        best = np.array(candidates[int(np.argmin(costs))], dtype=np.float64)
        best_cost = min(costs)
        for step in self.pattern_steps:
            for _ in range(self.max_pattern_moves):
                improved = False
                for axis, direction in itertools.product((0, 1), (1.0, -1.0)):
                    trial = best.copy()
                    trial[axis] *= 1.0 + direction * step
                    cost = self._cost(members, trial)
                    if cost < best_cost:
                        best, best_cost, improved = trial, cost, True
                if not improved:
                    break
        return best

    def fit(self, box_sizes) -> list[SizeCluster]:
        sizes = np.asarray(box_sizes, dtype=np.float64).reshape(-1, 2)
        if sizes.shape[0] == 0 or np.any(sizes <= 0) or not np.all(np.isfinite(sizes)):
            raise HnkExceptBadOptions("k-means needs a non-empty list of positive finite (w, h) sizes")
        distinct = np.unique(sizes, axis=0).shape[0]
        if self.k < 1 or self.k > distinct:
            raise HnkExceptBadOptions(f"k-means with k={self.k} needs at least k distinct sizes, got {distinct}")
        rng = np.random.default_rng(self.seed)
        centroids = self._init_centroids(sizes, rng)
        previous = None
        for iteration in range(self.max_iters):
            distance = 1.0 - wh_iou(sizes, centroids)
            assignment = np.argmin(distance, axis=1)
            self.distortions.append(float(np.mean(distance[np.arange(sizes.shape[0]), assignment])))
            if previous is not None and np.array_equal(assignment, previous):
                break
            previous = assignment
            self.iterations = iteration + 1
            for cluster in range(self.k):
                members = sizes[assignment == cluster]
                if members.shape[0] == 0:
                    # farthest point from its own centroid, ties to the lowest index
                    own = distance[np.arange(sizes.shape[0]), assignment]
                    centroids[cluster] = sizes[int(np.argmax(own))]
                    self.logger.debug(f"k-means: re-seeded empty cluster {cluster} at {centroids[cluster]}")
                    continue
                centroids[cluster] = self._update(members, centroids[cluster])
        final = np.argmin(1.0 - wh_iou(sizes, centroids), axis=1)
        counts = np.bincount(final, minlength=self.k)
        order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
        self.logger.debug(f"k-means converged after {self.iterations} iterations, "
                          f"distortion {self.distortions[-1]:.6f}")
        return [SizeCluster(float(centroids[i, 0]), float(centroids[i, 1]), int(counts[i])) for i in order]


def kmeans_fit(box_sizes, k: int, seed: int, max_iters: int = 300) -> list[SizeCluster]:
    return KMeansFit(k, seed, max_iters).fit(box_sizes)


def kmeans_1d(values: Sequence[float], k: int) -> np.ndarray:
    """Exact 1-D k-means: best split of the sorted values into k contiguous groups. Centroids ascending"""
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = values.shape[0]
    if not 1 <= k <= n:
        raise HnkExceptBadOptions(f"1-D k-means needs 1 <= k <= {n}, got k={k}")
    best, best_cost = None, np.inf
    for cuts in itertools.combinations(range(1, n), k - 1):
        groups = np.split(values, cuts)
        cost = sum(float(np.sum((g - g.mean()) ** 2)) for g in groups)
        if cost < best_cost:
            best, best_cost = groups, cost
    return np.array([g.mean() for g in best])


def reference_level(smallest_size: float, levels: Sequence[int], base_scale_constant: float) -> int:
    """Level whose base anchor size is nearest (in log scale) to smallest_size"""
    distances = [abs(np.log(smallest_size) - np.log(base_scale_constant * 2 ** level)) for level in levels]
    return list(levels)[int(np.argmin(distances))]


def derive_scales_ratios(clusters: Sequence[SizeCluster], levels: Sequence[int],
                         base_scale_constant: float) -> AnchorConfig:
    if len(clusters) != 9:
        raise HnkExceptBadOptions(f"Deriving scales and ratios needs exactly 9 clusters, got {len(clusters)}")
    wh = np.array([[c.w, c.h] for c in clusters], dtype=np.float64)
    aspect = np.sqrt(wh[:, 0] / wh[:, 1])
    size = np.sqrt(wh[:, 0] * wh[:, 1])

    ratio_centroids = kmeans_1d(aspect, 3)
    level = reference_level(float(size.min()), levels, base_scale_constant)
    scale_centroids = kmeans_1d(size / (base_scale_constant * 2 ** level), 3)
    scale_centroids = scale_centroids / scale_centroids[0]

    cfg = AnchorConfig(levels=list(levels), base_scale_constant=float(base_scale_constant),
                       scales=[float(s) for s in scale_centroids],
                       ratios=[(float(r), float(1.0 / r)) for r in ratio_centroids])
    for name, centroids in (("scale", scale_centroids), ("ratio", ratio_centroids)):
        if np.any(np.isclose(np.diff(centroids), 0.0, atol=1e-9)):
            cfg.warnings.append(f"duplicate {name} centroids {list(np.round(centroids, 6))}: clusters have "
                                f"no spread in {name}")
    return cfg
