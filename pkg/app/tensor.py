"""
Dense float64 tensors with a small reverse-mode tape.

Each differentiable op returns a Tensor carrying a GraphNode (op name, parent
tensors and a backward rule mapping the output gradient to one gradient per
parent). Nodes are only recorded when a parent requires a gradient, so
inference with frozen weights builds no graph at all.

Broadcasting is limited to leading batch dimensions: the trailing extents of
both operands must match exactly (a 0-d operand matches anything).
"""
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

from app.errors import NumericError, ShapeError

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


@dataclass(eq=False)
class GraphNode:
    op: str
    parents: Tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    __slots__ = ("data", "requires_grad", "node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, node: Optional[GraphNode] = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.node = node

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"Expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        op = f", op={self.node.op}" if self.node else ""
        return f"Tensor(shape={self.shape}{flag}{op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: TensorLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, node=GraphNode(op, tuple(parents), backward))
    return Tensor(data)


def _check_leading_broadcast(op: str, a: Tuple[int, ...], b: Tuple[int, ...]):
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) and tuple(long_[len(long_) - len(short):]) != tuple(short):
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading batch dimensions")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# --- Elementwise ---

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading_broadcast("add", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading_broadcast("sub", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_leading_broadcast("mul", a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, "mul", (a, b), backward)


def scale(a: TensorLike, factor: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * factor, "scale", (a,), lambda g: (g * factor,))


def square(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def tanh(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def clip(a: TensorLike, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clamp to [lo, hi]; the gradient passes where the input lies inside (boundary included)."""
    a = as_tensor(a)
    if lo is None and hi is None:
        return a
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, "clip", (a,), lambda g: (g * inside,))


def gelu(a: TensorLike) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    a = as_tensor(a)
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * x ** 3))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) sqrt(2/pi) (1 + 3 * 0.044715 x^2)
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)
    return _make(out, "gelu", (a,), backward)


# --- Linear algebra / shape ---

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, _unbroadcast(gb, b.shape)
    return _make(np.matmul(a.data, b.data), "matmul", (a, b), backward)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"Cannot reshape {a.shape} into {shape}")
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: TensorLike, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"Invalid permutation {axes} for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def expand(a: TensorLike, shape: Sequence[int]) -> Tensor:
    """Repeat `a` along new leading dimensions."""
    a = as_tensor(a)
    shape = tuple(shape)
    _check_leading_broadcast("expand", a.shape, shape)
    return _make(np.broadcast_to(a.data, shape).copy(), "expand", (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[TensorLike], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _make(out, "concat", tensors, backward)


def narrow(a: TensorLike, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start <= start + length <= a.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[index] = g
        return (grad,)
    return _make(a.data[index].copy(), "narrow", (a,), backward)


# --- Reductions ---

def _restore(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,),
                 lambda g: (_restore(g, a.shape, axis, keepdims).copy(),))


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)
    return _make(out, "mean", (a,), lambda g: (_restore(g, a.shape, axis, keepdims) / count,))


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, "softmax", (a,), backward)


def log_softmax(a: TensorLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _make(out, "log_softmax", (a,), backward)


def layer_norm(a: TensorLike, gamma: Optional[TensorLike] = None, beta: Optional[TensorLike] = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis; a constant row maps to zeros before the affine part."""
    a = as_tensor(a)
    width = a.shape[-1]
    centered = a.data - a.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    parents = [a]
    g_data = b_data = None
    if gamma is not None:
        gamma = as_tensor(gamma)
        if gamma.shape != (width,):
            raise ShapeError(f"layer_norm: gamma shape {gamma.shape} != ({width},)")
        g_data = gamma.data
        parents.append(gamma)
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape != (width,):
            raise ShapeError(f"layer_norm: beta shape {beta.shape} != ({width},)")
        b_data = beta.data
        parents.append(beta)
    out = xhat * g_data if g_data is not None else xhat
    if b_data is not None:
        out = out + b_data

    def backward(g):
        gxhat = g * g_data if g_data is not None else g
        ga = inv_std / width * (width * gxhat - gxhat.sum(axis=-1, keepdims=True)
                                - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        grads = [ga]
        if g_data is not None:
            grads.append(_unbroadcast(g * xhat, (width,)))
        if b_data is not None:
            grads.append(_unbroadcast(g, (width,)))
        return tuple(grads)
    return _make(out, "layer_norm", parents, backward)


# --- Indexing ---

def take_last(a: TensorLike, indices: np.ndarray) -> Tensor:
    """out[..] = a[.., indices[..]] with one index per row of the last axis."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"take_last: indices shape {idx.shape} != {a.shape[:-1]}")
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx[..., None], g[..., None], axis=-1)
        return (grad,)
    return _make(out, "take_last", (a,), backward)


def max_excluding(a: TensorLike, indices: np.ndarray) -> Tensor:
    """Row-wise max over the last axis, skipping the column named by `indices`."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != a.shape[:-1]:
        raise ShapeError(f"max_excluding: indices shape {idx.shape} != {a.shape[:-1]}")
    masked = a.data.copy()
    np.put_along_axis(masked, idx[..., None], -np.inf, axis=-1)
    winner = masked.argmax(axis=-1)
    out = np.take_along_axis(a.data, winner[..., None], axis=-1)[..., 0]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, winner[..., None], g[..., None], axis=-1)
        return (grad,)
    return _make(out, "max_excluding", (a,), backward)


def cross_entropy(logits: TensorLike, labels: np.ndarray, reduction: str = "mean") -> Tensor:
    picked = take_last(log_softmax(logits), labels)
    total = sum_(picked)
    if reduction == "sum":
        return scale(total, -1.0)
    if reduction == "mean":
        return scale(total, -1.0 / max(picked.data.size, 1))
    raise ValueError(f"Unknown reduction {reduction!r}")


# --- Reverse mode ---

def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in seen:
            continue
        seen.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def gradients(loss: Tensor, wrt: Sequence[Tensor]) -> list:
    """d loss / d w for every w in `wrt`; tensors the loss does not reach get zeros."""
    if loss.data.size != 1:
        raise ShapeError(f"Gradients need a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(_topological_order(loss)):
        node = tensor.node
        upstream = grads.get(id(tensor))
        if node is None or upstream is None:
            continue
        for parent, grad in zip(node.parents, node.backward(upstream)):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + grad if key in grads else np.array(grad, dtype=DTYPE)
    return [np.array(grads[id(w)]) if id(w) in grads else np.zeros_like(w.data) for w in wrt]


def grad_input(loss: Tensor, input_: Tensor) -> np.ndarray:
    return gradients(loss, [input_])[0]


def ensure_finite(values: np.ndarray, what: str):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite values in {what}")


# --- Finite differences ---

def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-3,
                       indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central differences of a scalar function; restricted to `indices` when given."""
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    positions = indices if indices is not None else list(np.ndindex(*x.shape))
    for pos in positions:
        original = x[pos]
        x[pos] = original + step
        upper = fn(x)
        x[pos] = original - step
        lower = fn(x)
        x[pos] = original
        grad[pos] = (upper - lower) / (2.0 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale_ = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale_
