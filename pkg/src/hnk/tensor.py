"""
Dense float64 tensors with a small reverse-mode differentiation engine.

Every primitive is a registered class with a forward and a vector-Jacobian product. Feature
maps are channel-first (C, H, W) and a single image is processed per pass.
"""
from __future__ import annotations

import itertools
import logging
import threading
from abc import ABC, abstractmethod
from contextlib import contextmanager
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .exception import HnkExceptBadOptions, HnkExceptInternalError, HnkExceptNonFinite, HnkExceptShapeMismatch

ArrayLike = Union[np.ndarray, float, int, Sequence]

_node_ids = itertools.count(0)
# Active tape stack and grad mode are per thread: one pass never crosses threads
_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the enclosed block (inference, validation, finite differences)"""
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        self.requires_grad: bool = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name: Optional[str] = name
        # Set when the tensor is the output of a recorded primitive
        self.node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise HnkExceptShapeMismatch(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class Node:
    """One recorded primitive application"""

    def __init__(self, primitive: BasePrimitive, inputs: list[Tensor], attrs: dict, saved: dict):
        self.node_id: int = next(_node_ids)
        self.primitive: BasePrimitive = primitive
        self.inputs: list[Tensor] = inputs
        self.attrs: dict = attrs
        self.saved: dict = saved
        self.output_data: Optional[np.ndarray] = None
        # Incremented by backward(), a replay must touch every node once
        self.visits: int = 0

    @property
    def kind(self) -> str:
        return self.primitive.name


class Tape:
    """
    Ordered record of the primitive applications of one forward pass.
    Use as a context manager: nodes created inside the block are appended in creation order.
    backward() replays a tape when given one, the trainer records every sample on its own.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *args):
        _tape_stack().pop()


def _active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class BasePrimitive(ABC):
    """
    Base class every primitive inherits from. Subclasses are registered by name with @primitive
    """
    name: str = ""
    # None means variadic with at least min_inputs inputs
    arity: Optional[int] = 1
    min_inputs: int = 1

    def check(self, arrays: list[np.ndarray], attrs: dict) -> None:
        """Raise HnkExceptShapeMismatch on invalid input shapes or attributes"""
        pass

    @abstractmethod
    def forward(self, arrays: list[np.ndarray], attrs: dict) -> tuple[np.ndarray, dict]:
        """Return the output array and whatever the backward pass needs"""
        raise NotImplementedError

    @abstractmethod
    def backward(self, grad: np.ndarray, arrays: list[np.ndarray], out: np.ndarray,
                 saved: dict, attrs: dict) -> list[Optional[np.ndarray]]:
        """Return one gradient per input, shaped like that input"""
        raise NotImplementedError

    def fail(self, message: str):
        raise HnkExceptShapeMismatch(f"{self.name}: {message}")


_PRIMITIVES: dict[str, BasePrimitive] = {}


def primitive(cls):
    """Class decorator registering a primitive under its name"""
    _PRIMITIVES[cls.name] = cls()
    return cls


def primitive_names() -> list[str]:
    return sorted(_PRIMITIVES)


def primitive_forward(kind: str, inputs: Sequence[Tensor], attrs: Optional[Mapping] = None) -> Tensor:
    """
    Apply a registered primitive. Records a node on the active tape (and links it to the output)
    when grad mode is on and any input requires a gradient.
    """
    prim = _PRIMITIVES.get(kind)
    if prim is None:
        raise HnkExceptBadOptions(f"Unknown primitive {kind}. Known primitives: {primitive_names()}")
    attrs = dict(attrs or {})
    inputs = list(inputs)
    if prim.arity is not None and len(inputs) != prim.arity:
        prim.fail(f"expects {prim.arity} inputs, got {len(inputs)}")
    if prim.arity is None and len(inputs) < prim.min_inputs:
        prim.fail(f"expects at least {prim.min_inputs} inputs, got {len(inputs)}")
    arrays = [t.data for t in inputs]
    for index, array in enumerate(arrays):
        if not np.all(np.isfinite(array)):
            raise HnkExceptNonFinite(f"{kind}: input {index} contains non-finite values")
    prim.check(arrays, attrs)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        out, saved = prim.forward(arrays, attrs)
    if not np.all(np.isfinite(out)):
        raise HnkExceptNonFinite(f"{kind}: output is non-finite, input outside the primitive's domain")
    result = Tensor(out)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        node = Node(prim, inputs, attrs, saved)
        node.output_data = result.data
        result.node = node
        result.requires_grad = True
        tape = _active_tape()
        if tape is not None:
            tape.record(node)
    return result


def _graph_from_root(root: Tensor) -> tuple[dict[int, Node], dict[int, Tensor]]:
    nodes: dict[int, Node] = {}
    leaves: dict[int, Tensor] = {}
    stack = [root]
    seen: set[int] = set()
    while stack:
        tensor = stack.pop()
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        if tensor.node is not None:
            nodes[tensor.node.node_id] = tensor.node
            stack.extend(tensor.node.inputs)
        elif tensor.requires_grad:
            leaves[id(tensor)] = tensor
    return nodes, leaves


def _graph_from_tape(root: Tensor, tape: Tape) -> tuple[dict[int, Node], dict[int, Tensor]]:
    nodes = {node.node_id: node for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    if root.node is None:
        leaves[id(root)] = root
    elif root.node.node_id not in nodes:
        raise HnkExceptInternalError("backward: root was not recorded on the given tape")
    for node in tape.nodes:
        for tensor in node.inputs:
            if tensor.node is not None:
                if tensor.node.node_id not in nodes:
                    raise HnkExceptInternalError(f"backward: input of {node.kind} was recorded outside the tape")
            elif tensor.requires_grad:
                leaves[id(tensor)] = tensor
    return nodes, leaves


def backward(root: Tensor, params: Optional[Mapping[str, Tensor]] = None,
             tape: Optional[Tape] = None) -> dict[str, np.ndarray]:
    """
    Replay the graph under root in reverse creation order. Populates .grad of every reachable
    leaf that requires a gradient and returns name -> gradient for the named ones. Tensors in
    params that root does not depend on get a zero gradient.

    Given the tape the forward pass was recorded on, the replay walks its nodes instead of
    searching the graph from root. Every node feeding the tape must then be on it.
    """
    if root.data.size != 1:
        raise HnkExceptShapeMismatch(f"backward: root must be a scalar, got shape {root.shape}")
    if root.node is None and not root.requires_grad:
        raise HnkExceptShapeMismatch("backward: root was not produced on a tape")

    nodes, leaves = _graph_from_root(root) if tape is None else _graph_from_tape(root, tape)

    node_grads: dict[int, np.ndarray] = {}
    leaf_grads: dict[int, np.ndarray] = {}
    if root.node is not None:
        node_grads[root.node.node_id] = np.ones_like(root.data)
    else:
        leaf_grads[id(root)] = np.ones_like(root.data)

    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        grad = node_grads.pop(node_id, None)
        if grad is None:
            continue
        node.visits += 1
        arrays = [t.data for t in node.inputs]
        input_grads = node.primitive.backward(grad, arrays, node.output_data, node.saved, node.attrs)
        for tensor, input_grad in zip(node.inputs, input_grads):
            if input_grad is None or not tensor.requires_grad:
                continue
            if tensor.node is not None:
                key, target = tensor.node.node_id, node_grads
            else:
                key, target = id(tensor), leaf_grads
            if key in target:
                target[key] = target[key] + input_grad
            else:
                target[key] = input_grad

    grad_map: dict[str, np.ndarray] = {}
    # parameters are shared between threads, only the local gradient goes into grad_map
    for key, tensor in leaves.items():
        grad = leaf_grads.get(key, np.zeros_like(tensor.data))
        if tensor.name is not None:
            grad_map[tensor.name] = grad
        tensor.grad = grad
    if params:
        for name, tensor in params.items():
            if id(tensor) not in leaves:
                grad = np.zeros_like(tensor.data)
                grad_map[name] = grad
                tensor.grad = grad
    return grad_map


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """
    Max over components of |analytic - central difference| / max(1, |analytic|)
    """
    if not 0.0 < h <= 1e-3:
        raise HnkExceptBadOptions(f"grad_check step must lie in (0, 1e-3], got {h}")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    out = f(leaf)
    if out.node is None and not out.requires_grad:
        analytic = np.zeros_like(base)
    else:
        backward(out)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    with no_grad():
        for index in range(base.size):
            shifted = base.copy()
            shifted.flat[index] += h
            f_plus = f(Tensor(shifted)).item()
            shifted.flat[index] -= 2 * h
            f_minus = f(Tensor(shifted)).item()
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise HnkExceptNonFinite(f"grad_check: function is non-finite at a perturbed point {index}")
            numeric.flat[index] = (f_plus - f_minus) / (2 * h)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to shape, undoing numpy broadcasting"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(prim: BasePrimitive, a: np.ndarray, b: np.ndarray):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        prim.fail(f"shapes {a.shape} and {b.shape} do not broadcast")


def _check_feature_map(prim: BasePrimitive, x: np.ndarray):
    if x.ndim != 3:
        prim.fail(f"expects a (C, H, W) feature map, got shape {x.shape}")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _window(xp: np.ndarray, i: int, j: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    return xp[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride]


def _conv_geometry(prim: BasePrimitive, x: np.ndarray, k: int, attrs: dict) -> tuple[int, int, int, int]:
    stride = attrs.get("stride", 1)
    if stride not in (1, 2):
        prim.fail(f"stride must be 1 or 2, got {stride}")
    padding = attrs.get("padding", k // 2)
    out_h = (x.shape[1] + 2 * padding - k) // stride + 1
    out_w = (x.shape[2] + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        prim.fail(f"kernel {k} does not fit spatial size {x.shape[1:]}")
    return stride, padding, out_h, out_w


@primitive
class Conv2d(BasePrimitive):
    name = "conv2d"
    arity = 2

    def check(self, arrays, attrs):
        x, w = arrays
        _check_feature_map(self, x)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            self.fail(f"kernel must be (C_out, C_in, k, k), got {w.shape}")
        if w.shape[1] != x.shape[0]:
            self.fail(f"kernel expects {w.shape[1]} input channels, input has {x.shape[0]}")

    def forward(self, arrays, attrs):
        x, w = arrays
        k = w.shape[2]
        stride, padding, out_h, out_w = _conv_geometry(self, x, k, attrs)
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        out = np.zeros((w.shape[0], out_h, out_w))
        for i in range(k):
            for j in range(k):
                out += np.tensordot(w[:, :, i, j], _window(xp, i, j, stride, out_h, out_w), axes=([1], [0]))
        return out, {"stride": stride, "padding": padding}

    def backward(self, grad, arrays, out, saved, attrs):
        x, w = arrays
        k = w.shape[2]
        stride, padding = saved["stride"], saved["padding"]
        out_h, out_w = grad.shape[1:]
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                window = _window(xp, i, j, stride, out_h, out_w)
                dw[:, :, i, j] = np.tensordot(grad, window, axes=([1, 2], [1, 2]))
                dxp[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    np.tensordot(w[:, :, i, j], grad, axes=([0], [0]))
        dx = dxp[:, padding:padding + x.shape[1], padding:padding + x.shape[2]]
        return [dx, dw]


@primitive
class DepthwiseConv2d(BasePrimitive):
    name = "depthwise_conv2d"
    arity = 2

    def check(self, arrays, attrs):
        x, w = arrays
        _check_feature_map(self, x)
        if w.ndim != 4 or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
            self.fail(f"kernel must be (C, 1, k, k), got {w.shape}")
        if w.shape[0] != x.shape[0]:
            self.fail(f"kernel has {w.shape[0]} channels, input has {x.shape[0]}")

    def forward(self, arrays, attrs):
        x, w = arrays
        k = w.shape[2]
        stride, padding, out_h, out_w = _conv_geometry(self, x, k, attrs)
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        out = np.zeros((x.shape[0], out_h, out_w))
        for i in range(k):
            for j in range(k):
                out += _window(xp, i, j, stride, out_h, out_w) * w[:, 0, i, j][:, None, None]
        return out, {"stride": stride, "padding": padding}

    def backward(self, grad, arrays, out, saved, attrs):
        x, w = arrays
        k = w.shape[2]
        stride, padding = saved["stride"], saved["padding"]
        out_h, out_w = grad.shape[1:]
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for i in range(k):
            for j in range(k):
                window = _window(xp, i, j, stride, out_h, out_w)
                dw[:, 0, i, j] = np.sum(grad * window, axis=(1, 2))
                dxp[:, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                    grad * w[:, 0, i, j][:, None, None]
        dx = dxp[:, padding:padding + x.shape[1], padding:padding + x.shape[2]]
        return [dx, dw]


@primitive
class PointwiseConv2d(BasePrimitive):
    name = "pointwise_conv2d"
    arity = 2

    def check(self, arrays, attrs):
        x, w = arrays
        _check_feature_map(self, x)
        if w.ndim != 2 or w.shape[1] != x.shape[0]:
            self.fail(f"kernel must be (C_out, {x.shape[0]}), got {w.shape}")

    def forward(self, arrays, attrs):
        x, w = arrays
        return np.tensordot(w, x, axes=([1], [0])), {}

    def backward(self, grad, arrays, out, saved, attrs):
        x, w = arrays
        return [np.tensordot(w, grad, axes=([0], [0])), np.tensordot(grad, x, axes=([1, 2], [1, 2]))]


@primitive
class BiasAdd(BasePrimitive):
    name = "bias_add"
    arity = 2

    def check(self, arrays, attrs):
        x, b = arrays
        if b.ndim != 1 or x.ndim < 1 or b.shape[0] != x.shape[0]:
            self.fail(f"bias of shape {b.shape} does not match channel axis of {x.shape}")

    def forward(self, arrays, attrs):
        x, b = arrays
        return x + b.reshape((-1,) + (1,) * (x.ndim - 1)), {}

    def backward(self, grad, arrays, out, saved, attrs):
        axes = tuple(range(1, grad.ndim))
        return [grad, grad.sum(axis=axes) if axes else grad]


@primitive
class Relu(BasePrimitive):
    name = "relu"

    def forward(self, arrays, attrs):
        return np.maximum(arrays[0], 0.0), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [grad * (arrays[0] > 0)]


@primitive
class Sigmoid(BasePrimitive):
    name = "sigmoid"

    def forward(self, arrays, attrs):
        return _stable_sigmoid(arrays[0]), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [grad * out * (1.0 - out)]


@primitive
class Swish(BasePrimitive):
    name = "swish"

    def forward(self, arrays, attrs):
        s = _stable_sigmoid(arrays[0])
        return arrays[0] * s, {"sigmoid": s}

    def backward(self, grad, arrays, out, saved, attrs):
        s = saved["sigmoid"]
        return [grad * (s + arrays[0] * s * (1.0 - s))]


@primitive
class SoftmaxChannel(BasePrimitive):
    """Softmax over axis 0 (the channel axis) at every remaining position"""
    name = "softmax_channel"

    def check(self, arrays, attrs):
        if arrays[0].ndim < 1:
            self.fail("needs a channel axis")

    def forward(self, arrays, attrs):
        x = arrays[0]
        e = np.exp(x - x.max(axis=0, keepdims=True))
        return e / e.sum(axis=0, keepdims=True), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [out * (grad - np.sum(grad * out, axis=0, keepdims=True))]


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the align-corners bilinear weights of output sample i"""
    matrix = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        matrix[:, 0] = 1.0
        return matrix
    position = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    low = np.minimum(np.floor(position).astype(int), n_in - 2)
    fraction = position - low
    rows = np.arange(n_out)
    matrix[rows, low] = 1.0 - fraction
    matrix[rows, low + 1] += fraction
    return matrix


@primitive
class UpsampleBilinear(BasePrimitive):
    name = "upsample_bilinear"

    def check(self, arrays, attrs):
        _check_feature_map(self, arrays[0])
        size = attrs.get("size")
        if size is None or len(size) != 2 or min(size) < 1:
            self.fail(f"attribute size must be (out_h, out_w), got {size}")

    def forward(self, arrays, attrs):
        x = arrays[0]
        rows = interpolation_matrix(x.shape[1], attrs["size"][0])
        cols = interpolation_matrix(x.shape[2], attrs["size"][1])
        tmp = np.tensordot(rows, x, axes=([1], [1])).transpose(1, 0, 2)
        return np.tensordot(tmp, cols, axes=([2], [1])), {"rows": rows, "cols": cols}

    def backward(self, grad, arrays, out, saved, attrs):
        tmp = np.tensordot(grad, saved["cols"], axes=([2], [0]))
        return [np.tensordot(saved["rows"], tmp, axes=([0], [1])).transpose(1, 0, 2)]


@primitive
class DownsampleStride2(BasePrimitive):
    """2x2 average pooling with stride 2"""
    name = "downsample_stride2"

    def check(self, arrays, attrs):
        x = arrays[0]
        _check_feature_map(self, x)
        if x.shape[1] % 2 or x.shape[2] % 2:
            self.fail(f"spatial size {x.shape[1:]} must be even")

    def forward(self, arrays, attrs):
        x = arrays[0]
        return 0.25 * (x[:, 0::2, 0::2] + x[:, 1::2, 0::2] + x[:, 0::2, 1::2] + x[:, 1::2, 1::2]), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [np.repeat(np.repeat(0.25 * grad, 2, axis=1), 2, axis=2)]


@primitive
class Add(BasePrimitive):
    name = "add"
    arity = 2

    def check(self, arrays, attrs):
        _check_broadcast(self, *arrays)

    def forward(self, arrays, attrs):
        return arrays[0] + arrays[1], {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [_unbroadcast(grad, arrays[0].shape), _unbroadcast(grad, arrays[1].shape)]


@primitive
class Sub(BasePrimitive):
    name = "sub"
    arity = 2

    def check(self, arrays, attrs):
        _check_broadcast(self, *arrays)

    def forward(self, arrays, attrs):
        return arrays[0] - arrays[1], {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [_unbroadcast(grad, arrays[0].shape), _unbroadcast(-grad, arrays[1].shape)]


@primitive
class Mul(BasePrimitive):
    name = "mul"
    arity = 2

    def check(self, arrays, attrs):
        _check_broadcast(self, *arrays)

    def forward(self, arrays, attrs):
        return arrays[0] * arrays[1], {}

    def backward(self, grad, arrays, out, saved, attrs):
        a, b = arrays
        return [_unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)]


@primitive
class Div(BasePrimitive):
    name = "div"
    arity = 2

    def check(self, arrays, attrs):
        _check_broadcast(self, *arrays)

    def forward(self, arrays, attrs):
        return arrays[0] / arrays[1], {}

    def backward(self, grad, arrays, out, saved, attrs):
        a, b = arrays
        return [_unbroadcast(grad / b, a.shape), _unbroadcast(-grad * a / (b * b), b.shape)]


@primitive
class ScalarMul(BasePrimitive):
    """x times a constant (attribute value) or times a one-element tensor (second input)"""
    name = "scalar_mul"
    arity = None
    min_inputs = 1

    def check(self, arrays, attrs):
        if len(arrays) > 2:
            self.fail(f"expects 1 or 2 inputs, got {len(arrays)}")
        if len(arrays) == 2 and arrays[1].size != 1:
            self.fail(f"scalar factor must have one element, got shape {arrays[1].shape}")
        if len(arrays) == 1 and "value" not in attrs:
            self.fail("needs a value attribute or a scalar tensor input")

    def forward(self, arrays, attrs):
        factor = arrays[1].reshape(-1)[0] if len(arrays) == 2 else float(attrs["value"])
        return arrays[0] * factor, {"factor": factor}

    def backward(self, grad, arrays, out, saved, attrs):
        grads = [grad * saved["factor"]]
        if len(arrays) == 2:
            grads.append(np.sum(grad * arrays[0]).reshape(arrays[1].shape))
        return grads


@primitive
class WeightedSum(BasePrimitive):
    """
    Fast normalized fusion: inputs are [weights, map_1, ..., map_k] and the output is
    sum_i relu(w_i) / (eps + sum_j relu(w_j)) * map_i
    """
    name = "weighted_sum"
    arity = None
    min_inputs = 3

    def check(self, arrays, attrs):
        weights, maps = arrays[0], arrays[1:]
        if weights.ndim != 1 or weights.shape[0] != len(maps):
            self.fail(f"weights shape {weights.shape} does not match {len(maps)} inputs")
        for index, feature in enumerate(maps):
            if feature.shape != maps[0].shape:
                self.fail(f"input {index + 1} has shape {feature.shape}, expected {maps[0].shape}")

    def forward(self, arrays, attrs):
        weights, maps = arrays[0], arrays[1:]
        eps = attrs.get("eps", 1e-4)
        relu = np.maximum(weights, 0.0)
        total = eps + relu.sum()
        coefficients = relu / total
        out = np.zeros_like(maps[0])
        for coefficient, feature in zip(coefficients, maps):
            out = out + coefficient * feature
        return out, {"relu": relu, "total": total, "coefficients": coefficients}

    def backward(self, grad, arrays, out, saved, attrs):
        weights, maps = arrays[0], arrays[1:]
        relu, total, coefficients = saved["relu"], saved["total"], saved["coefficients"]
        d_coefficients = np.array([np.sum(grad * feature) for feature in maps])
        d_relu = d_coefficients / total - np.dot(d_coefficients, relu) / (total * total)
        d_weights = d_relu * (weights > 0)
        return [d_weights] + [coefficient * grad for coefficient in coefficients]


@primitive
class Log(BasePrimitive):
    name = "log"

    def forward(self, arrays, attrs):
        return np.log(arrays[0]), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [grad / arrays[0]]


@primitive
class Exp(BasePrimitive):
    name = "exp"

    def forward(self, arrays, attrs):
        return np.exp(arrays[0]), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [grad * out]


@primitive
class Abs(BasePrimitive):
    name = "abs"

    def forward(self, arrays, attrs):
        return np.abs(arrays[0]), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [grad * np.sign(arrays[0])]


@primitive
class Pow(BasePrimitive):
    """x ** p for a constant exponent p"""
    name = "pow"

    def check(self, arrays, attrs):
        if "exponent" not in attrs:
            self.fail("needs an exponent attribute")

    def forward(self, arrays, attrs):
        return np.power(arrays[0], float(attrs["exponent"])), {}

    def backward(self, grad, arrays, out, saved, attrs):
        exponent = float(attrs["exponent"])
        if exponent == 0.0:
            return [np.zeros_like(grad)]
        return [grad * exponent * np.power(arrays[0], exponent - 1.0)]


@primitive
class Clamp(BasePrimitive):
    name = "clamp"

    def check(self, arrays, attrs):
        if attrs.get("low", -np.inf) > attrs.get("high", np.inf):
            self.fail(f"low bound {attrs.get('low')} exceeds high bound {attrs.get('high')}")

    def forward(self, arrays, attrs):
        return np.clip(arrays[0], attrs.get("low", -np.inf), attrs.get("high", np.inf)), {}

    def backward(self, grad, arrays, out, saved, attrs):
        x = arrays[0]
        inside = (x >= attrs.get("low", -np.inf)) & (x <= attrs.get("high", np.inf))
        return [grad * inside]


@primitive
class Where(BasePrimitive):
    """Select a where the constant condition holds, b elsewhere"""
    name = "where"
    arity = 2

    def check(self, arrays, attrs):
        if "condition" not in attrs:
            self.fail("needs a condition attribute")
        try:
            np.broadcast_shapes(np.shape(attrs["condition"]), arrays[0].shape, arrays[1].shape)
        except ValueError:
            self.fail(f"condition {np.shape(attrs['condition'])} does not broadcast with "
                      f"{arrays[0].shape} and {arrays[1].shape}")

    def forward(self, arrays, attrs):
        return np.where(attrs["condition"], arrays[0], arrays[1]), {}

    def backward(self, grad, arrays, out, saved, attrs):
        condition = np.asarray(attrs["condition"], dtype=bool)
        return [_unbroadcast(np.where(condition, grad, 0.0), arrays[0].shape),
                _unbroadcast(np.where(condition, 0.0, grad), arrays[1].shape)]


@primitive
class Affine(BasePrimitive):
    """x * scale + shift with constant (broadcastable) scale and shift"""
    name = "affine"

    def check(self, arrays, attrs):
        try:
            np.broadcast_shapes(np.shape(attrs.get("scale", 1.0)), np.shape(attrs.get("shift", 0.0)),
                                arrays[0].shape)
        except ValueError:
            self.fail(f"scale/shift do not broadcast with {arrays[0].shape}")

    def forward(self, arrays, attrs):
        return arrays[0] * attrs.get("scale", 1.0) + attrs.get("shift", 0.0), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [_unbroadcast(grad * attrs.get("scale", 1.0), arrays[0].shape)]


def _reduction_axes(prim: BasePrimitive, x: np.ndarray, axis) -> Optional[tuple]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for a in axes:
        if not -x.ndim <= a < x.ndim:
            prim.fail(f"axis {a} out of range for shape {x.shape}")
    return tuple(a % x.ndim for a in axes)


def _expand_reduced(grad: np.ndarray, shape: tuple, axes: Optional[tuple]) -> np.ndarray:
    if axes is None:
        return np.broadcast_to(grad.reshape(-1)[0], shape).copy()
    kept = tuple(size for axis, size in enumerate(shape) if axis not in axes)
    return np.broadcast_to(np.expand_dims(grad.reshape(kept), axes), shape).copy()


@primitive
class ReduceSum(BasePrimitive):
    name = "reduce_sum"

    def check(self, arrays, attrs):
        _reduction_axes(self, arrays[0], attrs.get("axis"))

    def forward(self, arrays, attrs):
        axes = _reduction_axes(self, arrays[0], attrs.get("axis"))
        return np.asarray(np.sum(arrays[0], axis=axes), dtype=np.float64), {"axes": axes}

    def backward(self, grad, arrays, out, saved, attrs):
        return [_expand_reduced(grad, arrays[0].shape, saved["axes"])]


@primitive
class ReduceMean(BasePrimitive):
    name = "reduce_mean"

    def check(self, arrays, attrs):
        _reduction_axes(self, arrays[0], attrs.get("axis"))
        if arrays[0].size == 0:
            self.fail("mean of an empty tensor")

    def forward(self, arrays, attrs):
        x = arrays[0]
        axes = _reduction_axes(self, x, attrs.get("axis"))
        count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
        return np.asarray(np.mean(x, axis=axes), dtype=np.float64), {"axes": axes, "count": count}

    def backward(self, grad, arrays, out, saved, attrs):
        return [_expand_reduced(grad / saved["count"], arrays[0].shape, saved["axes"])]


@primitive
class Reshape(BasePrimitive):
    name = "reshape"

    def check(self, arrays, attrs):
        shape = tuple(attrs.get("shape", ()))
        known = [s for s in shape if s != -1]
        if shape.count(-1) > 1 or (shape.count(-1) == 0 and int(np.prod(shape)) != arrays[0].size) or \
                (shape.count(-1) == 1 and (not known or arrays[0].size % int(np.prod(known)))):
            self.fail(f"cannot reshape {arrays[0].shape} to {shape}")

    def forward(self, arrays, attrs):
        return arrays[0].reshape(tuple(attrs["shape"])), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [grad.reshape(arrays[0].shape)]


@primitive
class Transpose(BasePrimitive):
    name = "transpose"

    def check(self, arrays, attrs):
        axes = tuple(attrs.get("axes", ()))
        if sorted(axes) != list(range(arrays[0].ndim)):
            self.fail(f"axes {axes} are not a permutation for shape {arrays[0].shape}")

    def forward(self, arrays, attrs):
        return np.ascontiguousarray(arrays[0].transpose(tuple(attrs["axes"]))), {}

    def backward(self, grad, arrays, out, saved, attrs):
        return [grad.transpose(np.argsort(attrs["axes"]))]


@primitive
class Concat(BasePrimitive):
    name = "concat"
    arity = None
    min_inputs = 1

    def check(self, arrays, attrs):
        axis = attrs.get("axis", 0)
        reference = arrays[0]
        for index, array in enumerate(arrays):
            if array.ndim != reference.ndim or any(
                    s != r for d, (s, r) in enumerate(zip(array.shape, reference.shape)) if d != axis % reference.ndim):
                self.fail(f"input {index} has shape {array.shape}, incompatible with {reference.shape} on axis {axis}")

    def forward(self, arrays, attrs):
        return np.concatenate(arrays, axis=attrs.get("axis", 0)), {}

    def backward(self, grad, arrays, out, saved, attrs):
        axis = attrs.get("axis", 0)
        splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return list(np.split(grad, splits, axis=axis))


@primitive
class Take(BasePrimitive):
    """Gather entries along an axis at constant integer indices"""
    name = "take"

    def check(self, arrays, attrs):
        indices = np.asarray(attrs.get("indices", []))
        axis = attrs.get("axis", 0)
        if indices.dtype.kind not in "iu":
            self.fail("indices must be integers")
        if indices.size and (indices.min() < -arrays[0].shape[axis] or indices.max() >= arrays[0].shape[axis]):
            self.fail(f"indices out of range for axis {axis} of size {arrays[0].shape[axis]}")

    def forward(self, arrays, attrs):
        return np.take(arrays[0], np.asarray(attrs["indices"]), axis=attrs.get("axis", 0)), {}

    def backward(self, grad, arrays, out, saved, attrs):
        axis = attrs.get("axis", 0)
        dx = np.zeros_like(arrays[0])
        moved = np.moveaxis(dx, axis, 0)
        np.add.at(moved, np.asarray(attrs["indices"]), np.moveaxis(grad, axis, 0))
        return [dx]


# Thin functional wrappers used by the model and the losses


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    return primitive_forward("conv2d", [x, w], {"stride": stride})


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    return primitive_forward("depthwise_conv2d", [x, w], {"stride": stride})


def pointwise_conv2d(x: Tensor, w: Tensor) -> Tensor:
    return primitive_forward("pointwise_conv2d", [x, w])


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("bias_add", [x, b])


def relu(x: Tensor) -> Tensor:
    return primitive_forward("relu", [x])


def sigmoid(x: Tensor) -> Tensor:
    return primitive_forward("sigmoid", [x])


def swish(x: Tensor) -> Tensor:
    return primitive_forward("swish", [x])


def softmax_channel(x: Tensor) -> Tensor:
    return primitive_forward("softmax_channel", [x])


def upsample_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    return primitive_forward("upsample_bilinear", [x], {"size": tuple(size)})


def downsample_stride2(x: Tensor) -> Tensor:
    return primitive_forward("downsample_stride2", [x])


def add(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("mul", [a, b])


def div(a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("div", [a, b])


def scalar_mul(x: Tensor, factor: Union[float, Tensor]) -> Tensor:
    if isinstance(factor, Tensor):
        return primitive_forward("scalar_mul", [x, factor])
    return primitive_forward("scalar_mul", [x], {"value": factor})


def weighted_sum(weights: Tensor, inputs: Sequence[Tensor], eps: float = 1e-4) -> Tensor:
    return primitive_forward("weighted_sum", [weights, *inputs], {"eps": eps})


def log(x: Tensor) -> Tensor:
    return primitive_forward("log", [x])


def exp(x: Tensor) -> Tensor:
    return primitive_forward("exp", [x])


def absolute(x: Tensor) -> Tensor:
    return primitive_forward("abs", [x])


def power(x: Tensor, exponent: float) -> Tensor:
    return primitive_forward("pow", [x], {"exponent": exponent})


def clamp(x: Tensor, low: float = -np.inf, high: float = np.inf) -> Tensor:
    return primitive_forward("clamp", [x], {"low": low, "high": high})


def where(condition: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    return primitive_forward("where", [a, b], {"condition": np.asarray(condition, dtype=bool)})


def affine(x: Tensor, scale: ArrayLike = 1.0, shift: ArrayLike = 0.0) -> Tensor:
    return primitive_forward("affine", [x], {"scale": scale, "shift": shift})


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    return primitive_forward("reduce_sum", [x], {"axis": axis})


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    return primitive_forward("reduce_mean", [x], {"axis": axis})


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return primitive_forward("reshape", [x], {"shape": tuple(shape)})


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return primitive_forward("transpose", [x], {"axes": tuple(axes)})


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return primitive_forward("concat", list(tensors), {"axis": axis})


def take(x: Tensor, indices: ArrayLike, axis: int = 0) -> Tensor:
    return primitive_forward("take", [x], {"indices": np.asarray(indices, dtype=np.int64), "axis": axis})


logging.getLogger("debug_log").debug(f"Registered {len(_PRIMITIVES)} tensor primitives")
