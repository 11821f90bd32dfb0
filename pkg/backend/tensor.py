"""
Dense float64 tensors with a dynamic reverse-mode tape.

Every op below records a closure that maps the output gradient to one
gradient per parent; ``Tensor.backward`` replays them in reverse
topological order and accumulates into leaf tensors only.
"""

from __future__ import annotations

import logging
import math
import threading
from collections.abc import Callable, Iterator, Sequence
from contextlib import contextmanager
from typing import Any

import numpy as np
from exceptions import DimensionError, NumericalError

logger = logging.getLogger(__name__)

ArrayLike = Any
BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """Whether new ops record themselves on the tape (per thread)"""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph, e.g. for inference or finite differences"""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """n-dimensional float64 array with optional gradient tracking"""

    __array_priority__ = 100  # ndarray <op> Tensor dispatches to Tensor

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, op: str = "tensor"
    ) -> None:
        array = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(array)):
            msg = f"non-finite values produced by '{op}'"
            raise NumericalError(msg)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:  # noqa: N802
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Copy of the underlying values"""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            msg = f"item() needs a single value, tensor has shape {self.shape}"
            raise DimensionError(msg)
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    # Autodiff
    # ------------------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _topological_order(self) -> list[Tensor]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: ArrayLike | None = None) -> None:
        """
        Propagate gradients from this tensor to every tracked leaf.

        Args:
            grad: Seed gradient; defaults to ones (the usual scalar-loss case)
        """
        if not self.requires_grad:
            msg = "backward() called on a tensor that does not require grad"
            raise RuntimeError(msg)

        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, float)
        pending: dict[int, np.ndarray] = {id(self): seed}

        for node in reversed(self._topological_order()):
            node_grad = pending.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
                continue
            for parent, parent_grad in zip(
                node._parents, node._backward(node_grad), strict=True
            ):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad

    # ------------------------------------------------------------------
    # Operator sugar
    # ------------------------------------------------------------------

    def __add__(self, other: ArrayLike) -> Tensor:
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        return index(self, key)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return tensor_mean(self, axis, keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants so ops can treat every operand uniformly"""
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(
    data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str
) -> Tensor:
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=track, op=op)
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a broadcast gradient back to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        msg = f"{op}: cannot broadcast {a.shape} with {b.shape}"
        raise DimensionError(msg) from e


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise product; also the broadcast product of an m×n by a 1×n"""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), backward, "div")


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if exponent == 0:
            return (np.zeros_like(a.data),)
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), backward, "power")


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out_data,)

    return _make(out_data, (a,), backward, "exp")


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out_data = np.log(a.data)
    return _make(out_data, (a,), backward, "log")


def clamp(a: ArrayLike, low: float, high: float) -> Tensor:
    """Clip to [low, high]; gradient flows only where the input was inside"""
    a = as_tensor(a)
    inside = (a.data >= low) & (a.data <= high)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * inside,)

    return _make(np.clip(a.data, low, high), (a,), backward, "clamp")


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    # exp of a non-positive argument never overflows
    decay = np.exp(-np.abs(a.data))
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + decay), decay / (1.0 + decay))

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * out_data * (1.0 - out_data),)

    return _make(out_data, (a,), backward, "sigmoid")


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (1.0 - out_data * out_data),)

    return _make(out_data, (a,), backward, "tanh")


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    active = a.data > 0

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * active,)

    return _make(np.where(active, a.data, 0.0), (a,), backward, "relu")


def smooth_l1(a: ArrayLike, beta: float = 1.0) -> Tensor:
    """Huber-style penalty: 0.5x²/β inside |x|<β, |x|−0.5β outside"""
    a = as_tensor(a)
    magnitude = np.abs(a.data)
    quadratic = magnitude < beta
    out_data = np.where(quadratic, 0.5 * a.data**2 / beta, magnitude - 0.5 * beta)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * np.where(quadratic, a.data / beta, np.sign(a.data)),)

    return _make(out_data, (a,), backward, "smooth_l1")


# ----------------------------------------------------------------------
# Shape manipulation and reductions
# ----------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        msg = f"matmul: cannot multiply {a.shape} by {b.shape}"
        raise DimensionError(msg)

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        msg = f"transpose expects a matrix, got shape {a.shape}"
        raise DimensionError(msg)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.T,)

    return _make(a.data.T, (a,), backward, "transpose")


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(tuple(shape))
    except ValueError as e:
        msg = f"reshape: cannot view {a.shape} as {tuple(shape)}"
        raise DimensionError(msg) from e

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g.reshape(a.shape),)

    return _make(out_data, (a,), backward, "reshape")


def index(a: ArrayLike, key: Any) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate gradient"""
    a = as_tensor(a)
    if isinstance(key, Tensor):
        key = key.data.astype(int)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(a.data[key], (a,), backward, "index")


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        msg = "concat needs at least one tensor"
        raise DimensionError(msg)
    try:
        out_data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        shapes = [p.shape for p in parts]
        msg = f"concat: incompatible shapes {shapes} along axis {axis}"
        raise DimensionError(msg) from e
    boundaries = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def backward(g: np.ndarray) -> tuple[np.ndarray, ...]:
        return tuple(np.split(g, boundaries, axis=axis))

    return _make(out_data, parts, backward, "concat")


def tensor_sum(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tensor_mean(a: ArrayLike, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis, keepdims), 1.0 / count)


# ----------------------------------------------------------------------
# Normalizations
# ----------------------------------------------------------------------


def softmax_rows(x: ArrayLike) -> Tensor:
    """Row-wise softmax over the last axis, stabilized by the row max"""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    out_data = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (out_data * (g - (g * out_data).sum(axis=-1, keepdims=True)),)

    return _make(out_data, (x,), backward, "softmax_rows")


def log_softmax_rows(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out_data = shifted - log_norm
    probs = np.exp(out_data)

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _make(out_data, (x,), backward, "log_softmax_rows")


def layer_norm(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Per-row standardization (no affine part; see layers.LayerNorm)"""
    x = as_tensor(x)
    if x.shape[-1] < 2:
        msg = f"layer_norm needs at least 2 features per row, got {x.shape}"
        raise DimensionError(msg)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        g_mean = g.mean(axis=-1, keepdims=True)
        gn_mean = (g * normalized).mean(axis=-1, keepdims=True)
        return (inv_std * (g - g_mean - normalized * gn_mean),)

    return _make(normalized, (x,), backward, "layer_norm")


# ----------------------------------------------------------------------
# Spatial ops on feature maps (c×h×w)
# ----------------------------------------------------------------------


def conv2d(
    x: ArrayLike, weight: ArrayLike, bias: ArrayLike, stride: int = 1, padding: int = 0
) -> Tensor:
    """
    Single-image 2-D convolution.

    Args:
        x: Input map c_in×H×W
        weight: Filters c_out×c_in×k×k
        bias: Per-filter offset (c_out,)
        stride: Step between output positions
        padding: Zero padding on every side

    Returns:
        Output map c_out×H'×W' with H' = (H + 2p − k)//stride + 1
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        msg = f"conv2d: input {x.shape} incompatible with filters {weight.shape}"
        raise DimensionError(msg)

    c_in, height, width = x.shape
    c_out, _, k, _ = weight.shape
    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1

    cols = np.empty((c_in, k, k, out_h, out_w))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = padded[
                :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
            ]
    cols_2d = cols.reshape(c_in * k * k, out_h * out_w)
    w_2d = weight.data.reshape(c_out, -1)
    out_data = (w_2d @ cols_2d).reshape(c_out, out_h, out_w)
    out_data += bias.data[:, None, None]

    def backward(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        g_2d = g.reshape(c_out, -1)
        grad_w = (g_2d @ cols_2d.T).reshape(weight.shape)
        grad_cols = (w_2d.T @ g_2d).reshape(c_in, k, k, out_h, out_w)
        grad_padded = np.zeros_like(padded)
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ] += grad_cols[:, i, j]
        grad_x = grad_padded[:, padding : padding + height, padding : padding + width]
        return grad_x, grad_w, g.sum(axis=(1, 2))

    return _make(out_data, (x, weight, bias), backward, "conv2d")


def global_average_pool(feature_map: ArrayLike) -> Tensor:
    """c×h×w -> 1×c, per-channel spatial mean"""
    feature_map = as_tensor(feature_map)
    if feature_map.ndim != 3:
        msg = f"global_average_pool expects c×h×w, got {feature_map.shape}"
        raise DimensionError(msg)
    channels = feature_map.shape[0]
    return reshape(tensor_mean(reshape(feature_map, (channels, -1)), axis=1), (1, channels))


def _sample_axis(
    start: float, extent: float, output_size: int, stride: int, limit: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Low index, high index and interpolation weight for P sample points on one axis"""
    points = start + (np.arange(output_size) + 0.5) * extent / output_size
    coords = np.clip(points / stride - 0.5, 0.0, limit - 1)
    low = np.floor(coords).astype(int)
    high = np.minimum(low + 1, limit - 1)
    return low, high, coords - low


def roi_align_boxes(
    feature_map: ArrayLike, boxes: np.ndarray, output_size: int, stride: int
) -> Tensor:
    """
    Bilinear RoI sampling for a batch of pixel-space boxes.

    Sample (i, j) of a box sits at the centre of cell (i, j) of a P×P grid
    laid over the box; pixel x maps to feature column x/stride − 0.5, so a
    box covering exactly one feature cell samples that cell's value.

    Returns:
        Tensor N×c×P×P
    """
    feature_map = as_tensor(feature_map)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    channels, height, width = feature_map.shape
    size = output_size

    frame_w, frame_h = width * stride, height * stride
    clipped = boxes.copy()
    clipped[:, [0, 2]] = np.clip(clipped[:, [0, 2]], 0.0, frame_w)
    clipped[:, [1, 3]] = np.clip(clipped[:, [1, 3]], 0.0, frame_h)

    samples = []
    for x1, y1, x2, y2 in clipped:
        box_w, box_h = x2 - x1, y2 - y1
        if box_w <= 0 or box_h <= 0:
            logger.warning(
                "Degenerate RoI (%.2f, %.2f, %.2f, %.2f); sampling a single point",
                x1, y1, x2, y2,
            )
            ys = _sample_axis(y1, 0.0, size, stride, height)
            xs = _sample_axis(x1, 0.0, size, stride, width)
        else:
            ys = _sample_axis(y1, box_h, size, stride, height)
            xs = _sample_axis(x1, box_w, size, stride, width)
        samples.append((ys, xs))

    fmap = feature_map.data
    out_data = np.empty((len(clipped), channels, size, size))
    for n, ((y_lo, y_hi, ly), (x_lo, x_hi, lx)) in enumerate(samples):
        wy, wx = ly[:, None], lx[None, :]
        out_data[n] = (
            (1 - wy) * (1 - wx) * fmap[:, y_lo[:, None], x_lo[None, :]]
            + (1 - wy) * wx * fmap[:, y_lo[:, None], x_hi[None, :]]
            + wy * (1 - wx) * fmap[:, y_hi[:, None], x_lo[None, :]]
            + wy * wx * fmap[:, y_hi[:, None], x_hi[None, :]]
        )

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(fmap)
        channel_idx = np.arange(channels)[:, None, None]
        for n, ((y_lo, y_hi, ly), (x_lo, x_hi, lx)) in enumerate(samples):
            wy, wx = ly[None, :, None], lx[None, None, :]
            corners = (
                (y_lo, x_lo, (1 - wy) * (1 - wx)),
                (y_lo, x_hi, (1 - wy) * wx),
                (y_hi, x_lo, wy * (1 - wx)),
                (y_hi, x_hi, wy * wx),
            )
            for rows, cols, weight in corners:
                np.add.at(
                    grad,
                    (channel_idx, rows[None, :, None], cols[None, None, :]),
                    g[n] * weight,
                )
        return (grad,)

    return _make(out_data, (feature_map,), backward, "roi_align")


def roi_align(
    feature_map: ArrayLike, box: Sequence[float], output_size: int, stride: int
) -> Tensor:
    """Single-box RoI align: c×h×w map and [x1,y1,x2,y2] box -> c×P×P"""
    pooled = roi_align_boxes(feature_map, np.asarray(box, float), output_size, stride)
    channels = pooled.shape[1]
    return reshape(pooled, (channels, output_size, output_size))


def scaled_dot_product(query: Tensor, key: Tensor) -> Tensor:
    """QKᵀ/√d, the attention logits shared by the refinement layers"""
    return mul(matmul(query, transpose(key)), 1.0 / math.sqrt(key.shape[-1]))
