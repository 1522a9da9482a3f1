"""
Multi-task network: a small depthwise-separable backbone (P1..P5), extra stride-2 levels, a weighted
bidirectional feature pyramid neck, a detection head shared across levels and a segmentation head that
fuses backbone P2 with every neck level at a quarter of the input resolution.

One layer table (`architecture`) drives parameter creation, cost counting and the `info` report.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from . import tensor as T
from .anchors import AnchorConfig, AnchorGrid, generate_grid
from .exception import HnkExceptBadConfig, HnkExceptBadOptions, HnkExceptShapeMismatch
from .geometry import Box, decode_array, nms
from .tensor import Tensor

GROUPS = ("enc", "det", "seg")
GROUP_PREFIXES = {"backbone.": "enc", "neck.": "enc", "det_head.": "det", "seg_head.": "seg"}
FUSION_EPS = 1e-4
SCORE_CLAMP = 1e-7


@dataclass
class ModelConfig:
    input_w: int = 128
    input_h: int = 128
    backbone_channels: list[int] = field(default_factory=lambda: [8, 16, 24, 32, 48])
    fpn_channels: int = 32
    bifpn_repeats: int = 2
    num_classes_det: int = 1
    num_seg_classes: int = 3
    seg_fuse_channels: int = 64
    # Set from the run's [anchors] section
    anchors: AnchorConfig = field(default_factory=AnchorConfig, init=False)

    @property
    def levels(self) -> list[int]:
        return list(self.anchors.levels)

    @property
    def det_row_width(self) -> int:
        return 5 + self.num_classes_det

    def validate(self):
        if self.num_seg_classes != 3:
            raise HnkExceptBadConfig(f"num_seg_classes is fixed to 3, got {self.num_seg_classes}")
        if len(self.backbone_channels) != 5 or any(c < 1 for c in self.backbone_channels):
            raise HnkExceptBadConfig(f"backbone_channels needs 5 positive entries (P1..P5), "
                                     f"got {self.backbone_channels}")
        for name in ("fpn_channels", "bifpn_repeats", "num_classes_det", "seg_fuse_channels"):
            if getattr(self, name) < 1:
                raise HnkExceptBadConfig(f"{name} must be at least 1, got {getattr(self, name)}")
        self.anchors.validate()
        # the backbone always reaches P5
        divisor = 2 ** max(self.levels + [5])
        if self.input_w % divisor or self.input_h % divisor or self.input_w < divisor or self.input_h < divisor:
            raise HnkExceptBadConfig(f"Input size {self.input_w}x{self.input_h} must be a positive multiple of "
                                     f"{divisor} for pyramid levels {self.levels}")


class LayerSpec(NamedTuple):
    name: str
    # sepconv, conv, pointwise or fusion. A fusion layer's c_in is its number of inputs
    kind: str
    c_in: int
    c_out: int
    kernel: int
    out_h: int
    out_w: int

    @property
    def group(self) -> str:
        return group_of(self.name)

    def param_shapes(self) -> dict[str, tuple]:
        if self.kind == "sepconv":
            k = self.kernel
            return {f"{self.name}.dw.weight": (self.c_in, 1, k, k), f"{self.name}.dw.bias": (self.c_in,),
                    f"{self.name}.pw.weight": (self.c_out, self.c_in), f"{self.name}.pw.bias": (self.c_out,)}
        if self.kind == "conv":
            return {f"{self.name}.weight": (self.c_out, self.c_in, self.kernel, self.kernel),
                    f"{self.name}.bias": (self.c_out,)}
        if self.kind == "pointwise":
            return {f"{self.name}.weight": (self.c_out, self.c_in), f"{self.name}.bias": (self.c_out,)}
        return {f"{self.name}.weight": (self.c_in,)}

    @property
    def params(self) -> int:
        return layer_params(self.kind, self.c_in, self.c_out, self.kernel)

    @property
    def macs(self) -> int:
        positions = self.out_h * self.out_w
        if self.kind == "sepconv":
            return positions * (self.kernel ** 2 * self.c_in + self.c_in * self.c_out)
        if self.kind == "conv":
            return positions * self.kernel ** 2 * self.c_in * self.c_out
        # pointwise, and fusion (one multiply per input per element)
        return positions * self.c_in * self.c_out


def layer_params(kind: str, c_in: int, c_out: int, kernel: int) -> int:
    """Parameter count of one layer, biases included"""
    if kind == "sepconv":
        return kernel * kernel * c_in + c_in + c_in * c_out + c_out
    if kind == "conv":
        return kernel * kernel * c_in * c_out + c_out
    if kind == "pointwise":
        return c_in * c_out + c_out
    if kind == "fusion":
        return c_in
    raise HnkExceptBadOptions(f"Unknown layer kind {kind}")


def group_of(name: str) -> str:
    for prefix, group in GROUP_PREFIXES.items():
        if name.startswith(prefix):
            return group
    raise HnkExceptBadOptions(f"Parameter {name} belongs to no group")


def architecture(cfg: ModelConfig) -> list[LayerSpec]:
    """Every parameterised layer in execution order, with its output size"""
    layers = []
    h, w = cfg.input_h, cfg.input_w
    c_prev = 3
    for stage, channels in enumerate(cfg.backbone_channels, start=1):
        h, w = h // 2, w // 2
        layers.append(LayerSpec(f"backbone.stage{stage}.conv1", "sepconv", c_prev, channels, 3, h, w))
        layers.append(LayerSpec(f"backbone.stage{stage}.conv2", "sepconv", channels, channels, 3, h, w))
        c_prev = channels

    fpn = cfg.fpn_channels
    levels = cfg.levels

    def size(level):
        return cfg.input_h // 2 ** level, cfg.input_w // 2 ** level

    for level in levels:
        if level <= 5:
            layers.append(LayerSpec(f"neck.lateral.p{level}", "pointwise", cfg.backbone_channels[level - 1], fpn, 1,
                                    *size(level)))
    for repeat in range(cfg.bifpn_repeats):
        prefix = f"neck.bifpn{repeat}"
        for level in reversed(levels[:-1]):
            layers.append(LayerSpec(f"{prefix}.td.p{level}.fuse", "fusion", 2, fpn, 1, *size(level)))
            layers.append(LayerSpec(f"{prefix}.td.p{level}.conv", "sepconv", fpn, fpn, 3, *size(level)))
        for index, level in enumerate(levels[1:], start=1):
            inputs = 2 if index == len(levels) - 1 else 3
            layers.append(LayerSpec(f"{prefix}.out.p{level}.fuse", "fusion", inputs, fpn, 1, *size(level)))
            layers.append(LayerSpec(f"{prefix}.out.p{level}.conv", "sepconv", fpn, fpn, 3, *size(level)))

    out_channels = cfg.anchors.anchors_per_cell * cfg.det_row_width
    for level in levels:
        suffix = "" if level == levels[0] else f"@p{level}"
        # shared weights: only the first level creates parameters, the rest only add cost
        layers.append(LayerSpec(f"det_head.conv1{suffix}", "sepconv", fpn, fpn, 3, *size(level)))
        layers.append(LayerSpec(f"det_head.conv2{suffix}", "sepconv", fpn, fpn, 3, *size(level)))
        layers.append(LayerSpec(f"det_head.pred{suffix}", "pointwise", fpn, out_channels, 1, *size(level)))

    fuse = cfg.seg_fuse_channels
    quarter = (cfg.input_h // 4, cfg.input_w // 4)
    layers.append(LayerSpec("seg_head.p2", "pointwise", cfg.backbone_channels[1], fuse, 1, *quarter))
    for level in levels:
        layers.append(LayerSpec(f"seg_head.p{level}", "pointwise", fpn, fuse, 1, *size(level)))
    layers.append(LayerSpec("seg_head.out", "conv", fuse, cfg.num_seg_classes, 3, *quarter))
    return layers


def _owns_params(layer: LayerSpec) -> bool:
    return "@" not in layer.name


def layer_costs(cfg: ModelConfig) -> list[dict]:
    """Rows of the per-layer cost table: name, kind, group, params, macs"""
    return [{"name": layer.name, "kind": layer.kind, "group": layer.group,
             "params": layer.params if _owns_params(layer) else 0, "macs": layer.macs}
            for layer in architecture(cfg)]


def count_params_flops(cfg: ModelConfig) -> tuple[int, int]:
    rows = layer_costs(cfg)
    return sum(row["params"] for row in rows), sum(row["macs"] for row in rows)


class ModelParams:
    """Named parameter tensors plus their group labels"""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.groups = {name: group_of(name) for name in tensors}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def names(self, groups: Optional[Iterable[str]] = None) -> list[str]:
        selected = set(GROUPS if groups is None else groups)
        return sorted(name for name, group in self.groups.items() if group in selected)

    def num_params(self, groups: Optional[Iterable[str]] = None) -> int:
        return sum(self.tensors[name].size for name in self.names(groups))

    def set_trainable(self, groups: Iterable[str]):
        trainable = set(groups)
        for name, tensor in self.tensors.items():
            tensor.requires_grad = self.groups[name] in trainable

    def checksum(self, groups: Optional[Iterable[str]] = None) -> str:
        digest = hashlib.sha256()
        for name in self.names(groups):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.tensors[name].data, dtype="<f8").tobytes())
        return digest.hexdigest()

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {name: Tensor(t.data.copy(), t.requires_grad, name)
                                         for name, t in self.tensors.items()})


def build(cfg: ModelConfig, seed: int) -> ModelParams:
    """Uniform +-sqrt(6 / fan_in) kernels, zero biases, unit fusion weights. Drawn in sorted name order"""
    cfg.validate()
    shapes, fusion = {}, set()
    for layer in architecture(cfg):
        if not _owns_params(layer):
            continue
        layer_shapes = layer.param_shapes()
        shapes.update(layer_shapes)
        if layer.kind == "fusion":
            fusion.update(layer_shapes)
    rng = np.random.default_rng(seed)
    tensors = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name in fusion:
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / int(np.prod(shape[1:])))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    params = ModelParams(cfg, tensors)
    logging.getLogger("debug_log").debug(f"Built model with {len(params)} tensors, {params.num_params()} parameters")
    return params


class ModelOutput(NamedTuple):
    det_raw: Optional[Tensor]
    seg_logits: Optional[Tensor]
    # level -> feature map: 2 is the backbone P2, the others are neck outputs
    pyramid: dict[int, Tensor]


class Detection(NamedTuple):
    box: Box
    score: float


def bifpn_fuse(inputs: Sequence[Tensor], weights: Tensor, epsilon: float = FUSION_EPS) -> Tensor:
    if len(inputs) < 2:
        raise HnkExceptShapeMismatch(f"bifpn_fuse needs at least 2 inputs, got {len(inputs)}")
    return T.weighted_sum(weights, inputs, epsilon)


def _sepconv(params: ModelParams, name: str, x: Tensor, stride: int = 1) -> Tensor:
    y = T.bias_add(T.depthwise_conv2d(x, params[f"{name}.dw.weight"], stride), params[f"{name}.dw.bias"])
    return T.bias_add(T.pointwise_conv2d(y, params[f"{name}.pw.weight"]), params[f"{name}.pw.bias"])


def _pointwise(params: ModelParams, name: str, x: Tensor) -> Tensor:
    return T.bias_add(T.pointwise_conv2d(x, params[f"{name}.weight"]), params[f"{name}.bias"])


def backbone_forward(params: ModelParams, image: Tensor) -> list[Tensor]:
    """P1..P5"""
    features, x = [], image
    for stage in range(1, 6):
        x = T.swish(_sepconv(params, f"backbone.stage{stage}.conv1", x, stride=2))
        x = T.swish(_sepconv(params, f"backbone.stage{stage}.conv2", x))
        features.append(x)
    return features


def neck_forward(params: ModelParams, backbone: Sequence[Tensor]) -> dict[int, Tensor]:
    levels = params.config.levels
    inputs: dict[int, Tensor] = {}
    for level in levels:
        if level <= 5:
            inputs[level] = _pointwise(params, f"neck.lateral.p{level}", backbone[level - 1])
        else:
            inputs[level] = T.downsample_stride2(inputs[level - 1])

    for repeat in range(params.config.bifpn_repeats):
        prefix = f"neck.bifpn{repeat}"
        top_down = {levels[-1]: inputs[levels[-1]]}
        for level in reversed(levels[:-1]):
            upper = top_down[level + 1]
            upsampled = T.upsample_bilinear(upper, inputs[level].shape[1:])
            fused = bifpn_fuse([inputs[level], upsampled], params[f"{prefix}.td.p{level}.fuse.weight"])
            top_down[level] = _sepconv(params, f"{prefix}.td.p{level}.conv", T.swish(fused))
        outputs = {levels[0]: top_down[levels[0]]}
        for index, level in enumerate(levels[1:], start=1):
            lower = T.downsample_stride2(outputs[level - 1])
            if index == len(levels) - 1:
                members = [inputs[level], lower]
            else:
                members = [inputs[level], top_down[level], lower]
            fused = bifpn_fuse(members, params[f"{prefix}.out.p{level}.fuse.weight"])
            outputs[level] = _sepconv(params, f"{prefix}.out.p{level}.conv", T.swish(fused))
        inputs = outputs
    return inputs


def flatten_head_output(maps: Sequence[Tensor], anchors_per_cell: int, row_width: int) -> Tensor:
    """
    Per-level head maps of shape (A * row_width, h, w) to one (sum h*w*A, row_width) tensor ordered like
    the anchor grid: level, then row-major cell, then anchor.
    """
    rows = []
    for feature in maps:
        _, h, w = feature.shape
        split = T.reshape(feature, (anchors_per_cell, row_width, h, w))
        rows.append(T.reshape(T.transpose(split, (2, 3, 0, 1)), (h * w * anchors_per_cell, row_width)))
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)


def det_forward(params: ModelParams, pyramid: dict[int, Tensor]) -> Tensor:
    cfg = params.config
    maps = []
    for level in cfg.levels:
        x = T.swish(_sepconv(params, "det_head.conv1", pyramid[level]))
        x = T.swish(_sepconv(params, "det_head.conv2", x))
        maps.append(_pointwise(params, "det_head.pred", x))
    return flatten_head_output(maps, cfg.anchors.anchors_per_cell, cfg.det_row_width)


def seg_forward(params: ModelParams, pyramid: dict[int, Tensor]) -> Tensor:
    cfg = params.config
    quarter = (cfg.input_h // 4, cfg.input_w // 4)
    fused = _pointwise(params, "seg_head.p2", pyramid[2])
    for level in cfg.levels:
        projected = _pointwise(params, f"seg_head.p{level}", pyramid[level])
        fused = T.add(fused, T.upsample_bilinear(projected, quarter))
    x = T.swish(fused)
    logits = T.bias_add(T.conv2d(x, params["seg_head.out.weight"]), params["seg_head.out.bias"])
    return T.upsample_bilinear(logits, (cfg.input_h, cfg.input_w))


def forward(params: ModelParams, image: Tensor, heads: Iterable[str] = ("det", "seg")) -> ModelOutput:
    cfg = params.config
    if image.shape != (3, cfg.input_h, cfg.input_w):
        raise HnkExceptShapeMismatch(f"forward: image shape {image.shape} does not match "
                                     f"(3, {cfg.input_h}, {cfg.input_w})")
    heads = set(heads)
    backbone = backbone_forward(params, image)
    pyramid = neck_forward(params, backbone)
    pyramid[2] = backbone[1]
    det_raw = det_forward(params, pyramid) if "det" in heads else None
    seg_logits = seg_forward(params, pyramid) if "seg" in heads else None
    return ModelOutput(det_raw, seg_logits, pyramid)


def anchor_grid(cfg: ModelConfig) -> AnchorGrid:
    return generate_grid(cfg.anchors, cfg.input_w, cfg.input_h)


def postprocess_detections(det_raw: np.ndarray, grid: AnchorGrid, cfg: ModelConfig, conf_threshold: float,
                           nms_threshold: float, max_detections: int = 100,
                           pre_nms_top: int = 1000) -> list[Detection]:
    """Score = objectness * class probability, per-class NMS, at most max_detections kept"""
    with np.errstate(over="ignore"):
        z = 1.0 / (1.0 + np.exp(-det_raw[:, 4:]))
    probabilities = np.clip(z, SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    scores = probabilities[:, :1] * probabilities[:, 1:]
    found: list[tuple[float, int, Detection]] = []
    for label in range(scores.shape[1]):
        candidates = np.flatnonzero(scores[:, label] >= conf_threshold)
        if candidates.size == 0:
            continue
        order = np.lexsort((candidates, -scores[candidates, label]))[:pre_nms_top]
        candidates = candidates[order]
        corners = decode_array(det_raw[candidates, :4], grid.cells[candidates])
        corners[:, [0, 2]] = np.clip(corners[:, [0, 2]], 0, cfg.input_w)
        corners[:, [1, 3]] = np.clip(corners[:, [1, 3]], 0, cfg.input_h)
        boxes = [Box(*row, label) for row in corners.tolist()]
        for kept in nms(boxes, scores[candidates, label].tolist(), nms_threshold):
            score = float(scores[candidates[kept], label])
            found.append((score, int(candidates[kept]), Detection(boxes[kept], score)))
    found.sort(key=lambda item: (-item[0], item[1]))
    return [detection for _, _, detection in found[:max_detections]]


def predict(params: ModelParams, image: Tensor, conf_threshold: float = 0.001, nms_threshold: float = 0.6,
            max_detections: int = 100, grid: Optional[AnchorGrid] = None) -> tuple[list[Detection], np.ndarray]:
    with T.no_grad():
        output = forward(params, image)
    grid = grid if grid is not None else anchor_grid(params.config)
    detections = postprocess_detections(output.det_raw.data, grid, params.config, conf_threshold, nms_threshold,
                                        max_detections)
    probabilities = T.softmax_channel(output.seg_logits).data
    return detections, np.argmax(probabilities, axis=0).astype(np.uint8)
