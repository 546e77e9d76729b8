"""
Reverse-mode automatic differentiation on numpy arrays.

Define-by-run: every op builds a fresh node holding its parents and a
backward closure; `backward(loss)` walks the graph in reverse topological
order. Only the ops the refinement network needs are provided, all in
float64. Feature maps are (C, H, W); point batches are (N, F).
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DomainError, InputError

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
_SCHEMA_KEY = "__schema_version__"

_grad_enabled: ContextVar[bool] = ContextVar("grad_enabled", default=True)

ArrayLike = Union[np.ndarray, float, int, Sequence]


@contextmanager
def no_grad():
    """Disable graph recording inside the block, for the current thread only"""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """A value in the graph with an optional gradient slot"""

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, values: ArrayLike, requires_grad: bool = False, op: str = "leaf"):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable leaf tensor with a unique dotted name"""

    __slots__ = ("name",)

    def __init__(self, values: ArrayLike, name: str):
        super().__init__(values, requires_grad=True, op="param")
        self.name = name


def as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(
    values: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], None],
    op: str,
) -> Tensor:
    track = _grad_enabled.get() and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=track, op=op)
    if track:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64).reshape(t.shape)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DomainError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# ---- elementwise arithmetic ----


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.values + b.values, (a, b), backward_fn, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.values - b.values, (a, b), backward_fn, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _result(a.values * b.values, (a, b), backward_fn, "mul")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward_fn(g):
        _accumulate(a, g * s)

    return _result(a.values * s, (a,), backward_fn, "mul_scalar")


# ---- linear algebra ----


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DomainError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _result(a.values @ b.values, (a, b), backward_fn, "matmul")


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """x: (C_in, H, W), weight: (C_out, C_in, k, k), bias: (C_out,)"""
    if x.ndim != 3 or weight.ndim != 4 or weight.shape[1] != x.shape[0]:
        raise DomainError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    if weight.shape[2] != weight.shape[3]:
        raise DomainError("conv2d: kernels must be square")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DomainError(f"conv2d: bias {bias.shape} does not match {weight.shape[0]} outputs")
    c_out, c_in, k, _ = weight.shape
    _, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DomainError(f"conv2d: {k}x{k} kernel larger than padded input {x.shape}")

    padded = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    _, h_out, w_out, _, _ = windows.shape
    # (H_out * W_out, C_in * k * k)
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, c_in * k * k)
    kernel = weight.values.reshape(c_out, -1)
    out = cols @ kernel.T
    if bias is not None:
        out = out + bias.values
    out = out.T.reshape(c_out, h_out, w_out)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        g_flat = g.reshape(c_out, -1).T
        if weight.requires_grad:
            _accumulate(weight, (g_flat.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g_flat.sum(axis=0))
        if x.requires_grad:
            g_cols = (g_flat @ kernel).reshape(h_out, w_out, c_in, k, k)
            g_padded = np.zeros_like(padded)
            for i in range(k):
                for j in range(k):
                    g_padded[
                        :,
                        i : i + stride * h_out : stride,
                        j : j + stride * w_out : stride,
                    ] += g_cols[:, :, :, i, j].transpose(2, 0, 1)
            _accumulate(x, g_padded[:, padding : padding + h, padding : padding + w])

    return _result(out, parents, backward_fn, "conv2d")


# ---- resampling and layout ----


def upsample_nearest(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """2x nearest upsampling of a (C, H, W) map, cropped to (out_h, out_w)"""
    if x.ndim != 3:
        raise DomainError(f"upsample_nearest expects (C, H, W), got {x.shape}")
    _, h, w = x.shape
    iy = np.arange(out_h) // 2
    ix = np.arange(out_w) // 2
    if out_h < 1 or out_w < 1 or iy[-1] >= h or ix[-1] >= w:
        raise DomainError(f"cannot upsample {x.shape} to {out_h}x{out_w}")
    index = (slice(None), iy[:, None], ix[None, :])

    def backward_fn(g):
        g_x = np.zeros(x.shape)
        np.add.at(g_x, index, g)
        _accumulate(x, g_x)

    return _result(x.values[index], (x,), backward_fn, "upsample_nearest")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        raise DomainError(f"concat: {e}") from e
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _result(out, tensors, backward_fn, "concat")


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    def backward_fn(g):
        _accumulate(x, g.reshape(x.shape))

    try:
        out = x.values.reshape(shape)
    except ValueError as e:
        raise DomainError(f"reshape: {e}") from e
    return _result(out, (x,), backward_fn, "reshape")


def bilinear_gather(feature: Tensor, xs: np.ndarray, ys: np.ndarray) -> Tensor:
    """Bilinear samples of a (C, H, W) map at N points, returned as (N, C)"""
    if feature.ndim != 3:
        raise DomainError(f"bilinear_gather expects (C, H, W), got {feature.shape}")
    _, h, w = feature.shape
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    corners = (
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    )
    f = feature.values
    out = sum(f[:, yy, xx] * wt for yy, xx, wt in corners).T

    def backward_fn(g):
        g_f = np.zeros(feature.shape)
        g_t = g.T
        for yy, xx, wt in corners:
            np.add.at(g_f, (slice(None), yy, xx), g_t * wt)
        _accumulate(feature, g_f)

    return _result(out, (feature,), backward_fn, "bilinear_gather")


# ---- activations ----


def sine(x: Tensor, omega: float = 1.0) -> Tensor:
    def backward_fn(g):
        _accumulate(x, g * omega * np.cos(omega * x.values))

    return _result(np.sin(omega * x.values), (x,), backward_fn, "sine")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.values)

    def backward_fn(g):
        _accumulate(x, g * (1.0 - out**2))

    return _result(out, (x,), backward_fn, "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0

    def backward_fn(g):
        _accumulate(x, g * mask)

    return _result(x.values * mask, (x,), backward_fn, "relu")


def elu(x: Tensor) -> Tensor:
    negative = np.minimum(x.values, 0.0)
    out = np.where(x.values > 0, x.values, np.expm1(negative))

    def backward_fn(g):
        _accumulate(x, g * np.where(x.values > 0, 1.0, np.exp(negative)))

    return _result(out, (x,), backward_fn, "elu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.values)

    def backward_fn(g):
        _accumulate(x, g * out)

    return _result(out, (x,), backward_fn, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.values <= 0):
        raise DomainError("log of a non-positive value")

    def backward_fn(g):
        _accumulate(x, g / x.values)

    return _result(np.log(x.values), (x,), backward_fn, "log")


def absolute(x: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(x, g * np.sign(x.values))

    return _result(np.abs(x.values), (x,), backward_fn, "abs")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        _accumulate(x, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), backward_fn, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _result(out, (x,), backward_fn, "log_softmax")


# ---- reductions ----


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    def backward_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result(x.values.sum(axis=axis), (x,), backward_fn, "sum")


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return mul_scalar(reduce_sum(x, axis=axis), 1.0 / count)


# ---- graph traversal ----


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> None:
    """Fill .grad of everything reachable from a scalar loss

    Gradients are recomputed from scratch; parameters passed in `params`
    that the loss does not reach end up with zero gradients.
    """
    if loss.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.values)

    order = _topological_order(loss)
    for node in order:
        if node.requires_grad:
            node.grad = None
    loss.grad = np.ones_like(loss.values)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.values)


# ---- optimization ----


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update; parameter arrays are replaced, never written in place"""
    if len(params) != len(grads):
        raise DomainError("adam_step: one gradient per parameter required")
    state.t += 1
    correction1 = 1.0 - beta1**state.t
    correction2 = 1.0 - beta2**state.t
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise DomainError(f"adam_step: gradient {g.shape} does not match {p.name} {p.shape}")
        m = state.m.get(p.name, np.zeros_like(p.values))
        v = state.v.get(p.name, np.zeros_like(p.values))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[p.name] = m
        state.v[p.name] = v
        if lr == 0:
            continue
        step = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        p.values = p.values - step
    return state


class Adam:
    """Adam over a fixed parameter list"""

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9, beta2: float = 0.999):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.values)

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in self.params]
        adam_step(self.params, grads, self.state, lr, self.beta1, self.beta2)


# ---- checkpoints ----


def save_parameters(params: Sequence[Parameter], path: Union[str, Path]) -> Path:
    """Flat name -> little-endian float64 array container with a schema version"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {p.name: np.ascontiguousarray(p.values, dtype="<f8") for p in params}
    if len(arrays) != len(params):
        raise DomainError("parameter names must be unique")
    arrays[_SCHEMA_KEY] = np.array(CHECKPOINT_SCHEMA_VERSION, dtype="<i8")
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    logger.info("saved %d parameters to %s", len(params), path)
    return path


def load_parameters(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: data[name].astype(np.float64) for name in data.files}
    except (OSError, ValueError) as e:
        raise InputError(f"unreadable checkpoint {path}: {e}") from e
    version = arrays.pop(_SCHEMA_KEY, None)
    if version is None or int(version) != CHECKPOINT_SCHEMA_VERSION:
        raise InputError(f"checkpoint {path} has unsupported schema version {version}")
    return arrays
