"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records the op kind and its inputs on the output tensor. The
vector-Jacobian product for each op kind lives in :data:`VJP`, looked up at
backward time, so the graph itself carries no closures.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, NonDeterministicLossError, NonScalarLossError, ShapeError

_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Tensor:
    """A node in the differentiation graph.

    Leaves are created directly; interior nodes come out of the primitives in
    this module and are read-only.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "inputs", "ctx", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self.inputs: tuple[Tensor, ...] = ()
        self.ctx = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        if self.values.size != 1:
            raise NonScalarLossError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def backward(self) -> dict[str, np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        kind = f"op={self.op}" if self.op else "leaf"
        return f"Tensor(shape={self.shape}, {kind}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return negate(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named learnable leaf."""

    __slots__ = ("name",)

    def __init__(self, values, name: str):
        super().__init__(values, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, values: np.ndarray, inputs: Sequence[Tensor], ctx=None) -> Tensor:
    out = Tensor.__new__(Tensor)
    values = np.asarray(values, dtype=np.float64)
    values.flags.writeable = False
    out.values = values
    out.grad = None
    track = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    out.op = op if track else None
    out.inputs = tuple(inputs) if track else ()
    out.ctx = ctx if track else None
    return out


def _broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return _result("add", a.values + b.values, (a, b))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("subtract", a, b)
    return _result("subtract", a.values - b.values, (a, b))


def multiply(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("elementwise_multiply", a, b)
    return _result("elementwise_multiply", a.values * b.values, (a, b))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result("scalar_multiply", a.values * c, (a,), c)


def negate(a) -> Tensor:
    a = as_tensor(a)
    return _result("negate", -a.values, (a,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    return _result("matmul", a.values @ b.values, (a, b))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _result("transpose", a.values.T.copy(), (a,))


def conv1d_temporal(x, w) -> Tensor:
    """Valid convolution along the last (time) axis, shared over the height axis.

    x: [B, F_in, H, T], w: [F_out, F_in, K] -> [B, F_out, H, T - K + 1]
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 3 or x.shape[1] != w.shape[1] or w.shape[2] > x.shape[3]:
        raise ShapeError(f"conv1d_temporal: incompatible input {x.shape} and kernel {w.shape}")
    windows = sliding_window_view(x.values, w.shape[2], axis=3)
    out = np.tensordot(windows, w.values, axes=([1, 4], [1, 2])).transpose(0, 3, 1, 2)
    return _result("conv1d_temporal", np.ascontiguousarray(out), (x, w))


def conv_spatial(x, w) -> Tensor:
    """Full-height convolution mixing all rows (electrodes) at each time step.

    x: [B, F_in, H, T], w: [F_out, F_in, H] -> [B, F_out, 1, T]
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 3 or x.shape[1:3] != w.shape[1:3]:
        raise ShapeError(f"conv_spatial: incompatible input {x.shape} and kernel {w.shape}")
    out = np.tensordot(x.values, w.values, axes=([1, 2], [1, 2])).transpose(0, 2, 1)
    return _result("conv_spatial", np.ascontiguousarray(out[:, :, None, :]), (x, w))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    v = x.values
    out = np.where(v > 0, v, alpha * np.expm1(np.minimum(v, 0.0)))
    return _result("elu", out, (x,), float(alpha))


def exp(x) -> Tensor:
    x = as_tensor(x)
    return _result("exp", np.exp(x.values), (x,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(~(x.values > 0)):
        bad = x.values[~(x.values > 0)].reshape(-1)[0]
        raise DomainError(f"log: non-positive input {bad!r} in tensor of shape {x.shape}")
    return _result("log", np.log(x.values), (x,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result("square", x.values * x.values, (x,))


def _check_axis(op: str, x: Tensor, axis: int | None) -> None:
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")


def sum_(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_axis("sum", x, axis)
    return _result("sum", np.sum(x.values, axis=axis, keepdims=keepdims), (x,), (axis, keepdims))


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    _check_axis("mean", x, axis)
    return _result("mean", np.mean(x.values, axis=axis, keepdims=keepdims), (x,), (axis, keepdims))


def max_pool_time(x, size: int) -> Tensor:
    """Non-overlapping max pooling over the last axis; a trailing remainder is dropped."""
    x = as_tensor(x)
    if size < 1 or x.ndim < 1 or x.shape[-1] < size:
        raise ShapeError(f"max_pool_time: pool size {size} does not fit shape {x.shape}")
    n_out = x.shape[-1] // size
    blocks = x.values[..., : n_out * size].reshape(*x.shape[:-1], n_out, size)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return _result("max_pool_time", out, (x,), (size, idx))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _result("reshape", out.copy(), (x,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} cannot be joined on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    return _result("concat", out, tensors, (axis, sizes))


def maximum_scalar(x, c: float = 0.0) -> Tensor:
    x = as_tensor(x)
    return _result("maximum_with_scalar", np.maximum(x.values, c), (x,), float(c))


# ---------------------------------------------------------------- adjoints
# Each rule maps (upstream grad, output node) to one gradient per input.


def _vjp_add(g, out):
    a, b = out.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _vjp_subtract(g, out):
    a, b = out.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def _vjp_multiply(g, out):
    a, b = out.inputs
    return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)


def _vjp_matmul(g, out):
    a, b = out.inputs
    return g @ b.values.T, a.values.T @ g


def _vjp_conv1d_temporal(g, out):
    x, w = out.inputs
    k = w.shape[2]
    windows = sliding_window_view(x.values, k, axis=3)
    gw = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
    gx = None
    if x.requires_grad:
        # full correlation of the upstream grad with the flipped kernel
        padded = np.pad(g, ((0, 0), (0, 0), (0, 0), (k - 1, k - 1)))
        gwin = sliding_window_view(padded, k, axis=3)
        gx = np.tensordot(gwin, w.values[:, :, ::-1], axes=([1, 4], [0, 2])).transpose(0, 3, 1, 2)
    return gx, gw


def _vjp_conv_spatial(g, out):
    x, w = out.inputs
    g2 = g[:, :, 0, :]
    gw = np.tensordot(g2, x.values, axes=([0, 2], [0, 3])) if w.requires_grad else None
    gx = np.tensordot(g2, w.values, axes=([1], [0])).transpose(0, 2, 3, 1) if x.requires_grad else None
    return gx, gw


def _vjp_elu(g, out):
    (x,) = out.inputs
    return (g * np.where(x.values > 0, 1.0, out.values + out.ctx),)


def _vjp_reduce(g, out):
    (x,) = out.inputs
    axis, keepdims = out.ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    g = np.broadcast_to(g, x.shape)
    if out.op == "mean":
        g = g * (out.values.size / x.values.size)
    return (g,)


def _vjp_max_pool(g, out):
    (x,) = out.inputs
    size, idx = out.ctx
    n_out = idx.shape[-1]
    blocks = np.zeros((*x.shape[:-1], n_out, size))
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    gx = np.zeros(x.shape)
    gx[..., : n_out * size] = blocks.reshape(*x.shape[:-1], n_out * size)
    return (gx,)


def _vjp_concat(g, out):
    axis, sizes = out.ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "subtract": _vjp_subtract,
    "elementwise_multiply": _vjp_multiply,
    "scalar_multiply": lambda g, out: (g * out.ctx,),
    "negate": lambda g, out: (-g,),
    "matmul": _vjp_matmul,
    "transpose": lambda g, out: (g.T,),
    "conv1d_temporal": _vjp_conv1d_temporal,
    "conv_spatial": _vjp_conv_spatial,
    "elu": _vjp_elu,
    "exp": lambda g, out: (g * out.values,),
    "log": lambda g, out: (g / out.inputs[0].values,),
    "square": lambda g, out: (2.0 * g * out.inputs[0].values,),
    "sum": _vjp_reduce,
    "mean": _vjp_reduce,
    "max_pool_time": _vjp_max_pool,
    "reshape": lambda g, out: (g.reshape(out.inputs[0].shape),),
    "concat": _vjp_concat,
    "maximum_with_scalar": lambda g, out: (g * (out.inputs[0].values > out.ctx),),
}

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "subtract": subtract,
    "elementwise_multiply": multiply,
    "scalar_multiply": scale,
    "negate": negate,
    "matmul": matmul,
    "transpose": transpose,
    "conv1d_temporal": conv1d_temporal,
    "conv_spatial": conv_spatial,
    "elu": elu,
    "exp": exp,
    "log": log,
    "square": square,
    "sum": sum_,
    "mean": mean,
    "max_pool_time": max_pool_time,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "maximum_with_scalar": maximum_scalar,
}


def primitive_forward(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply a primitive by name, e.g. ``primitive_forward("elu", [x], alpha=1.0)``."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Every reachable leaf with ``requires_grad`` gets its ``grad`` overwritten.
    Returns gradients keyed by parameter name: for ``params`` if given (zeros
    for parameters the loss does not reach), else for every reachable
    :class:`Parameter`.
    """
    if loss.values.size != 1:
        raise NonScalarLossError(f"backward needs a scalar loss, got shape {loss.shape}")
    reached: dict[str, np.ndarray] = {}
    if loss.requires_grad:
        pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        for node in reversed(_topological_order(loss)):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.op is None:
                node.grad = np.array(g, dtype=np.float64)
                if isinstance(node, Parameter):
                    reached[node.name] = node.grad
                continue
            for parent, pg in zip(node.inputs, VJP[node.op](g, node)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg
    if params is None:
        return reached
    return {p.name: reached[p.name] if p.name in reached else np.zeros(p.shape) for p in params}


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.max_rel_error.items() if not err <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))


def grad_check(
    build_loss: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` must rebuild the loss from the current parameter values on
    every call; parameters are perturbed in place and restored. Tensors with
    ``requires_grad=False`` are skipped.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    params = [p for p in params if p.requires_grad]
    first, second = build_loss(), build_loss()
    if first.values.tobytes() != second.values.tobytes():
        raise NonDeterministicLossError(
            f"build_loss returned {first.item()!r} then {second.item()!r} for identical parameters"
        )
    for p in params:
        p.grad = None
    backward(first)
    report = GradCheckReport(tol=tol)
    for i, p in enumerate(params):
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        numeric = np.zeros(p.shape)
        flat = p.values.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = build_loss().item()
            flat[j] = orig - h
            down = build_loss().item()
            flat[j] = orig
            numeric.reshape(-1)[j] = (up - down) / (2.0 * h)
        name = getattr(p, "name", f"input{i}")
        report.max_rel_error[name] = float(relative_error(analytic, numeric).max(initial=0.0))
    return report
