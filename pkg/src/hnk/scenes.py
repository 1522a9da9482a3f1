"""
Synthetic road scenes and the on-disk dataset format.

A scene is a road trapezoid narrowing towards a horizon, equally spaced lane lines drawn over the road and
axis-aligned vehicles with a dark 1-px border. Masks use 0 background, 1 drivable, 2 lane. Vehicle pixels
are background in the mask.

On disk a dataset is a JSON manifest plus binary PPM (P6) images and PGM (P5) masks, maxval 255.
"""
from __future__ import annotations

import json
import logging
import os
import warnings
from dataclasses import dataclass, field, replace
from typing import BinaryIO, NamedTuple, Optional

import numpy as np

from .exception import HnkExceptBadConfig, HnkExceptBadFile
from .geometry import Box
from .helpers.file_func import create_dir

SKY = (0.62, 0.74, 0.88)
GRASS = (0.30, 0.50, 0.26)
ROAD = (0.42, 0.42, 0.45)
LANE_PAINT = (0.96, 0.94, 0.80)
VEHICLE_BORDER = (0.04, 0.04, 0.04)
VEHICLE_COLORS = (
    (0.85, 0.12, 0.10), (0.12, 0.25, 0.85), (0.95, 0.80, 0.10), (0.10, 0.70, 0.75),
    (0.75, 0.20, 0.70), (1.00, 0.55, 0.10), (0.15, 0.15, 0.30), (0.98, 0.98, 0.98),
)
PLACEMENT_ATTEMPTS = 100
DEFAULT_MERGE = {"car": "vehicle", "truck": "vehicle", "bus": "vehicle", "train": "vehicle"}

logger = logging.getLogger("debug_log")


@dataclass
class SceneSpec:
    seed: int = 7
    width: int = 128
    height: int = 128
    vehicle_count: tuple[int, int] = (1, 4)
    # side length in pixels
    vehicle_size: tuple[int, int] = (6, 40)
    horizon: float = 0.4
    # horizon row shift, fraction of the height
    horizon_jitter: float = 0.05
    road_top_width: float = 0.08
    road_bottom_width: float = 0.95
    # vanishing point shift, fraction of the width
    road_jitter: float = 0.1
    lane_count: int = 2
    lane_thickness: int = 2
    noise: float = 0.02

    def validate(self):
        if self.width < 8 or self.height < 8:
            raise HnkExceptBadConfig(f"Scene size {self.width}x{self.height} is too small")
        low, high = self.vehicle_count
        if not 0 <= low <= high <= len(VEHICLE_COLORS):
            raise HnkExceptBadConfig(f"vehicle_count range {self.vehicle_count} must satisfy "
                                     f"0 <= min <= max <= {len(VEHICLE_COLORS)}")
        low, high = self.vehicle_size
        if not 3 <= low <= high <= min(self.width, self.height):
            raise HnkExceptBadConfig(f"vehicle_size range {self.vehicle_size} must satisfy 3 <= min <= max <= "
                                     f"{min(self.width, self.height)}")
        if not 0.0 < self.horizon < 1.0:
            raise HnkExceptBadConfig(f"horizon must lie in (0, 1), got {self.horizon}")
        if not 0.0 < self.road_top_width <= self.road_bottom_width <= 1.0:
            raise HnkExceptBadConfig("road widths must satisfy 0 < top <= bottom <= 1")
        if not 0.0 <= self.horizon_jitter < min(self.horizon, 1.0 - self.horizon):
            raise HnkExceptBadConfig(f"horizon_jitter must lie in [0, {min(self.horizon, 1.0 - self.horizon)}), "
                                     f"got {self.horizon_jitter}")
        if not 0.0 <= self.road_jitter < 0.5:
            raise HnkExceptBadConfig(f"road_jitter must lie in [0, 0.5), got {self.road_jitter}")
        if self.lane_count < 0:
            raise HnkExceptBadConfig(f"lane_count must not be negative, got {self.lane_count}")
        if self.lane_thickness < 1:
            raise HnkExceptBadConfig(f"lane_thickness must be at least 1 px, got {self.lane_thickness}")
        if self.noise < 0:
            raise HnkExceptBadConfig(f"noise must not be negative, got {self.noise}")


@dataclass
class DataConfig:
    # Load this manifest instead of generating scenes
    manifest: Optional[str] = None
    train_count: int = 400
    val_count: int = 100
    classes: list[str] = field(default_factory=lambda: ["vehicle"])
    category_merge: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_MERGE))
    scene: SceneSpec = field(default_factory=SceneSpec)

    def validate(self):
        if self.train_count < 1 or self.val_count < 1:
            raise HnkExceptBadConfig(f"train_count and val_count must be positive, got "
                                     f"{self.train_count} and {self.val_count}")
        if not self.classes or len(set(self.classes)) != len(self.classes):
            raise HnkExceptBadConfig(f"classes must be a non-empty list of distinct names, got {self.classes}")
        self.scene.validate()


@dataclass
class Sample:
    image: np.ndarray
    boxes: list[Box]
    seg_mask: np.ndarray
    name: str = ""
    # vehicles that could not be placed
    placement_failures: int = 0

    @property
    def width(self) -> int:
        return self.image.shape[2]

    @property
    def height(self) -> int:
        return self.image.shape[1]


class RoadGeometry(NamedTuple):
    top_row: int
    # per-row road interval [left, right) in pixel coordinates, evaluated at row centers
    left: np.ndarray
    right: np.ndarray
    # (lane_count, height) lane line centers
    lane_centers: np.ndarray


def road_geometry(spec: SceneSpec, center_x: float, top_row: int) -> RoadGeometry:
    rows = np.arange(spec.height) + 0.5
    t = np.clip((rows - top_row) / (spec.height - top_row), 0.0, 1.0)
    half_width = spec.width / 2 * (spec.road_top_width + (spec.road_bottom_width - spec.road_top_width) * t)
    center = center_x + (spec.width / 2 - center_x) * t
    left, right = center - half_width, center + half_width
    fractions = np.arange(1, spec.lane_count + 1) / (spec.lane_count + 1)
    lane_centers = left[None, :] + fractions[:, None] * (right - left)[None, :]
    return RoadGeometry(top_row, left, right, lane_centers)


def rasterize_road(spec: SceneSpec, road: RoadGeometry) -> np.ndarray:
    """(H, W) mask with 1 on the road and 2 on lane lines"""
    xs = np.arange(spec.width)[None, :] + 0.5
    below = (np.arange(spec.height) >= road.top_row)[:, None]
    on_road = below & (xs >= road.left[:, None]) & (xs < road.right[:, None])
    mask = on_road.astype(np.uint8)
    for centers in road.lane_centers:
        mask[on_road & (np.abs(xs - centers[:, None]) < spec.lane_thickness / 2)] = 2
    return mask


def _place_vehicles(spec: SceneSpec, rng: np.random.Generator, top_row: int) -> tuple[list[Box], int]:
    count = int(rng.integers(spec.vehicle_count[0], spec.vehicle_count[1] + 1))
    low, high = spec.vehicle_size
    boxes: list[Box] = []
    failures = 0
    for _ in range(count):
        for _attempt in range(PLACEMENT_ATTEMPTS):
            w, h = (int(v) for v in rng.integers(low, high + 1, size=2))
            x1 = int(rng.integers(0, spec.width - w + 1))
            y1 = int(rng.integers(max(0, min(top_row - h // 2, spec.height - h)), spec.height - h + 1))
            candidate = Box(x1, y1, x1 + w, y1 + h, 0)
            # one free pixel between vehicles
            if all(candidate.x1 > b.x2 or b.x1 > candidate.x2 or candidate.y1 > b.y2 or b.y1 > candidate.y2
                   for b in boxes):
                boxes.append(candidate)
                break
        else:
            failures += 1
    return boxes, failures


def render_scene(spec: SceneSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, list[Box], int]:
    """Noise-free image (3, H, W), mask, vehicle boxes and placement failures"""
    top_row = int(round(spec.height * (spec.horizon + rng.uniform(-spec.horizon_jitter, spec.horizon_jitter))))
    top_row = min(max(top_row, 1), spec.height - 2)
    center_x = spec.width / 2 + rng.uniform(-spec.road_jitter, spec.road_jitter) * spec.width
    road = road_geometry(spec, center_x, top_row)
    mask = rasterize_road(spec, road)

    image = np.empty((spec.height, spec.width, 3))
    image[:top_row] = SKY
    image[top_row:] = GRASS
    image[mask == 1] = ROAD
    image[mask == 2] = LANE_PAINT

    boxes, failures = _place_vehicles(spec, rng, top_row)
    for index, box in enumerate(boxes):
        x1, y1, x2, y2 = int(box.x1), int(box.y1), int(box.x2), int(box.y2)
        image[y1:y2, x1:x2] = VEHICLE_BORDER
        image[y1 + 1:y2 - 1, x1 + 1:x2 - 1] = VEHICLE_COLORS[index]
        mask[y1:y2, x1:x2] = 0
    return image.transpose(2, 0, 1).copy(), mask, boxes, failures


def generate(spec: SceneSpec, n: int) -> list[Sample]:
    """Sample i depends only on (spec, i)"""
    spec.validate()
    samples = []
    for index in range(n):
        rng = np.random.default_rng([spec.seed, index])
        image, mask, boxes, failures = render_scene(spec, rng)
        noise = rng.normal(size=image.shape)
        image = np.clip(image + spec.noise * noise, 0.0, 1.0)
        if failures:
            logger.warning(f"Scene {index}: placed {len(boxes)} vehicles, {failures} placements failed")
        samples.append(Sample(image, boxes, mask, f"scene_{index:05d}", failures))
    logger.debug(f"Generated {n} scenes with seed {spec.seed}")
    return samples


def flip_sample(sample: Sample) -> Sample:
    """Horizontal mirror of image, mask and boxes"""
    w = sample.width
    boxes = [Box(w - b.x2, b.y1, w - b.x1, b.y2, b.label) for b in sample.boxes]
    return replace(sample, image=sample.image[:, :, ::-1].copy(), seg_mask=sample.seg_mask[:, ::-1].copy(),
                   boxes=boxes)


def split_dataset(samples: list[Sample], val_count: int, seed: int) -> tuple[list[Sample], list[Sample]]:
    if not 0 < val_count < len(samples):
        raise HnkExceptBadConfig(f"Cannot hold out {val_count} of {len(samples)} samples for validation")
    order = np.random.default_rng(seed).permutation(len(samples))
    val = sorted(order[:val_count].tolist())
    train = sorted(order[val_count:].tolist())
    return [samples[i] for i in train], [samples[i] for i in val]


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path: str, image: np.ndarray):
    """image is (3, H, W) in [0, 1]"""
    _, h, w = image.shape
    with open(path, "wb") as handle:
        handle.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        handle.write(_quantize(image).transpose(1, 2, 0).tobytes())


def write_pgm(path: str, mask: np.ndarray):
    h, w = mask.shape
    with open(path, "wb") as handle:
        handle.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        handle.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def _read_header(handle: BinaryIO, path: str, magic: bytes) -> tuple[int, int]:
    tokens = []
    while len(tokens) < 4:
        line = handle.readline()
        if not line:
            raise HnkExceptBadFile(f"{path}: header ends early, expected magic, width, height and maxval")
        tokens.extend(line.split(b"#", 1)[0].split())
    if tokens[0] != magic or len(tokens) != 4:
        raise HnkExceptBadFile(f"{path}: malformed header, expected {magic.decode()} with width, height, maxval")
    try:
        width, height, maxval = (int(token) for token in tokens[1:])
    except ValueError:
        raise HnkExceptBadFile(f"{path}: header values are not integers")
    if width < 1 or height < 1 or maxval != 255:
        raise HnkExceptBadFile(f"{path}: unsupported header {width}x{height} maxval {maxval}, maxval must be 255")
    return width, height


def _read_payload(path: str, magic: bytes, channels: int) -> np.ndarray:
    try:
        with open(path, "rb") as handle:
            width, height = _read_header(handle, path, magic)
            payload = handle.read()
    except OSError as e:
        raise HnkExceptBadFile(f"Cannot read {path}: {e}")
    expected = width * height * channels
    if len(payload) != expected:
        raise HnkExceptBadFile(f"{path}: payload has {len(payload)} bytes, header promises {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)


def read_ppm(path: str) -> np.ndarray:
    return _read_payload(path, b"P6", 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path: str) -> np.ndarray:
    return _read_payload(path, b"P5", 1)[:, :, 0].copy()


def save_dataset(samples: list[Sample], directory: str, classes: Optional[list[str]] = None) -> str:
    """Writes images/, masks/ and manifest.json. Returns the manifest path"""
    classes = classes or ["vehicle"]
    create_dir(os.path.join(directory, "images"))
    create_dir(os.path.join(directory, "masks"))
    records = []
    for index, sample in enumerate(samples):
        name = sample.name or f"sample_{index:05d}"
        image_path = os.path.join("images", f"{name}.ppm")
        mask_path = os.path.join("masks", f"{name}.pgm")
        write_ppm(os.path.join(directory, image_path), sample.image)
        write_pgm(os.path.join(directory, mask_path), sample.seg_mask)
        records.append({
            "image": image_path,
            "mask": mask_path,
            "boxes": [{"x1": float(b.x1), "y1": float(b.y1), "x2": float(b.x2), "y2": float(b.y2),
                       "category": classes[b.label]}
                      for b in sample.boxes],
        })
    manifest = os.path.join(directory, "manifest.json")
    with open(manifest, "w") as handle:
        json.dump(records, handle, indent=1, sort_keys=True)
        handle.write("\n")
    logger.info(f"Saved {len(samples)} samples to {directory}")
    return manifest


class DatasetLoader:
    """
    Reads a manifest. Categories are merged first, then filtered against the class list; dropped boxes
    are counted in `dropped`.
    """

    def __init__(self, classes: list[str], category_merge: Optional[dict[str, str]] = None):
        self.classes = list(classes)
        self.category_merge = dict(DEFAULT_MERGE if category_merge is None else category_merge)
        self.dropped = 0
        self.clipped = 0
        self.logger = logging.getLogger("debug_log")

    def _box(self, record: dict, where: str, width: int, height: int) -> Optional[Box]:
        try:
            x1, y1, x2, y2 = (float(record[key]) for key in ("x1", "y1", "x2", "y2"))
            category = str(record["category"])
        except (KeyError, TypeError, ValueError) as e:
            raise HnkExceptBadFile(f"{where}: malformed box {record!r} ({e})")
        if x2 < x1 or y2 < y1:
            raise HnkExceptBadFile(f"{where}: box has x2 < x1 or y2 < y1: {record!r}")
        category = self.category_merge.get(category, category)
        if category not in self.classes:
            self.dropped += 1
            self.logger.warning(f"{where}: dropped box of category {category}")
            return None
        clipped = (min(max(x1, 0.0), width), min(max(y1, 0.0), height),
                   min(max(x2, 0.0), width), min(max(y2, 0.0), height))
        if clipped != (x1, y1, x2, y2):
            self.clipped += 1
        return Box(*clipped, self.classes.index(category))

    def load(self, manifest_path: str) -> list[Sample]:
        try:
            with open(manifest_path) as handle:
                records = json.load(handle)
        except OSError as e:
            raise HnkExceptBadFile(f"Cannot read manifest {manifest_path}: {e}")
        except json.JSONDecodeError as e:
            raise HnkExceptBadFile(f"Manifest {manifest_path} is not valid JSON: {e}")
        if not isinstance(records, list):
            raise HnkExceptBadFile(f"Manifest {manifest_path} must hold a list of records")
        base = os.path.dirname(os.path.abspath(manifest_path))
        samples = []
        for index, record in enumerate(records):
            where = f"{manifest_path} record {index}"
            if not isinstance(record, dict) or not {"image", "mask", "boxes"} <= set(record):
                raise HnkExceptBadFile(f"{where}: needs image, mask and boxes")
            image_path = os.path.join(base, record["image"])
            mask_path = os.path.join(base, record["mask"])
            image = read_ppm(image_path)
            mask = read_pgm(mask_path)
            if mask.max(initial=0) > 2:
                raise HnkExceptBadFile(f"{mask_path}: mask value {int(mask.max())} outside {{0, 1, 2}}")
            if mask.shape != image.shape[1:]:
                raise HnkExceptBadFile(f"{where}: mask {mask.shape} and image {image.shape[1:]} differ in size")
            boxes = [self._box(box, where, image.shape[2], image.shape[1]) for box in record["boxes"]]
            name = os.path.splitext(os.path.basename(record["image"]))[0]
            samples.append(Sample(image, [box for box in boxes if box is not None], mask, name))
        if self.dropped:
            warnings.warn(f"Dropped {self.dropped} boxes with categories outside {self.classes}")
        self.logger.info(f"Loaded {len(samples)} samples from {manifest_path}")
        return samples


def load_dataset(manifest_path: str, classes: Optional[list[str]] = None,
                 category_merge: Optional[dict[str, str]] = None) -> list[Sample]:
    return DatasetLoader(classes or ["vehicle"], category_merge).load(manifest_path)
